"""Top-magnitude sparsification, uniform quantization and error feedback.

Wire format for a compressed vector: the kept indices (ceil(log2 len) bits
each, omitted when nothing is dropped), the kept values at q bits each, and
the (min, max) scale pair at d bits each.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class CompressionConfig:
    """``r`` is the fraction of entries kept, ``q`` the bits per kept entry, ``d`` the raw float width."""

    r: float = 1.0
    q: int = 32
    sparsify: bool = True
    quantize: bool = True
    error_feedback: bool = True
    d: int = 32

    def __post_init__(self):
        if not 0.0 < self.r <= 1.0:
            raise ConfigError("r must lie in (0, 1]", "compression.r")
        if not 1 <= self.q <= self.d:
            raise ConfigError(f"q must lie in [1, {self.d}]", "compression.q")

    @property
    def drops(self) -> bool:
        return self.sparsify and self.r < 1.0


def round_keep(r: float, n: int) -> int:
    return min(n, max(1, math.floor(r * n + 0.5)))


def top_k_mask(v: np.ndarray, k: int) -> np.ndarray:
    """Mask of the k largest |v|; among equal magnitudes lower indices win."""
    order = np.argsort(-np.abs(v), kind="stable")
    mask = np.zeros(len(v), dtype=bool)
    mask[order[:k]] = True
    return mask


def sparsify(v: np.ndarray, r: float) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if r >= 1.0:
        return v.copy()
    return np.where(top_k_mask(v, round_keep(r, len(v))), v, 0.0)


def quantize(v: np.ndarray, q: int, mask: np.ndarray | None = None) -> np.ndarray:
    """Snap to the nearest of 2^q evenly spaced levels spanning [min, max].

    With ``mask`` only the selected entries define the range and get snapped;
    the rest pass through (so sparsified zeros stay zero on the wire).
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot quantize non-finite values")
    out = v.copy()
    sel = v if mask is None else v[mask]
    if sel.size == 0:
        return out
    lo, hi = sel.min(), sel.max()
    if hi == lo:
        return out
    steps = float(2**q - 1)
    t = np.rint((sel - lo) / (hi - lo) * steps) / steps
    # endpoints reproduce lo and hi exactly, which keeps quantize idempotent
    snapped = lo * (1.0 - t) + hi * t
    if mask is None:
        return snapped
    out[mask] = snapped
    return out


def compress(v: np.ndarray, cfg: CompressionConfig) -> np.ndarray:
    """Q_q(S_r(v)); quantization acts on the kept entries only."""
    v = np.asarray(v, dtype=np.float64)
    if cfg.drops:
        mask = top_k_mask(v, round_keep(cfg.r, len(v)))
        out = np.where(mask, v, 0.0)
    else:
        mask, out = None, v.copy()
    if cfg.quantize:
        out = quantize(out, cfg.q, mask)
    return out


def compress_with_feedback(g: np.ndarray, mem: np.ndarray, cfg: CompressionConfig) -> tuple[np.ndarray, np.ndarray]:
    """(g', m') with g' = Q_q(S_r(g + m)) and m' = g + m - g'."""
    g = np.asarray(g, dtype=np.float64)
    mem = np.asarray(mem, dtype=np.float64)
    if g.shape != mem.shape:
        raise ValueError(f"gradient length {g.shape} != memory length {mem.shape}")
    target = g + mem
    g_new = compress(target, cfg)
    return g_new, target - g_new


def compress_features(z: np.ndarray, cfg: CompressionConfig) -> np.ndarray:
    """Feature uploads are compressed once, without memory."""
    return compress(z, cfg)


def compressed_bits(v: np.ndarray, cfg: CompressionConfig, d: int | None = None) -> int:
    """Exact wire size of a vector produced by ``compress``."""
    d = cfg.d if d is None else d
    n = len(v)
    kept = round_keep(cfg.r, n) if cfg.drops else n
    bits = kept * (cfg.q if cfg.quantize else d)
    if cfg.drops:
        bits += kept * max(1, math.ceil(math.log2(n)))
    if cfg.quantize:
        bits += 2 * d
    return bits


class ErrorMemory:
    """Per-client residual memory, starting at zero."""

    def __init__(self, size: int):
        self.m = np.zeros(size)

    def step(self, g: np.ndarray, cfg: CompressionConfig) -> np.ndarray:
        g_new, self.m = compress_with_feedback(g, self.m, cfg)
        return g_new
