"""Gaussian-mechanism calibration for uploads: relative distance, noise scale, DP runs.

Noise on an upload ``v`` has per-element standard deviation
``sigma * R * std(v)``, with ``sigma`` from the closed-form bound
``(c2 * C / eps) * sqrt(-I * ln(delta))``. The bound leaves the constants
c1 and c2 unspecified; they default to 1 and every report says so. Reported epsilons are bound-based, not accountant-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import ClientPartition, Dataset
from .errors import ConfigError, DegenerateUploadError, DivergenceError
from .protocols import RoundConfig, TrainRun, client_update, run_protocol
from .seeds import stream

CONSTANTS_NOTE = "c1, c2 are unspecified constants (defaults 1); epsilon is bound-based"


@dataclass(frozen=True)
class DpConfig:
    epsilon: float
    delta: float
    c1: float = 1.0
    c2: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0", "dp.epsilon")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)", "dp.delta")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ConfigError("c1 and c2 must be positive", "dp.c2")


@dataclass(frozen=True)
class NoiseScale:
    sigma: float
    R: float
    std: float

    def __post_init__(self):
        if min(self.sigma, self.R, self.std) < 0:
            raise ValueError("noise scale components must be nonnegative")

    @property
    def noise_std(self) -> float:
        return self.sigma * self.R * self.std


@dataclass(frozen=True)
class SigmaReport:
    sigma: float
    applicable: bool  # eps < c1 * C^2 * I


def sigma_bound(dp: DpConfig, C: float, I: int) -> SigmaReport:
    """(c2 * C / eps) * sqrt(-I * ln delta), natural log."""
    if not 0 < dp.delta < 1:
        raise ConfigError("delta must lie in (0, 1)", "dp.delta")
    sigma = dp.c2 * C / dp.epsilon * math.sqrt(-I * math.log(dp.delta))
    return SigmaReport(sigma, dp.epsilon < dp.c1 * C * C * I)


def max_relative_distance(uploads, K: int) -> float:
    """max over ordered pairs (i, j) of max|g_i - g_j| / (K * std(g_i)).

    The std (population, over elements) is taken from the first vector of
    each pair. For a fixed anchor i the largest elementwise gap to any j is
    reached at a column extreme, so the search is linear in the upload count.
    """
    g = np.asarray(uploads, dtype=np.float64)
    if g.ndim != 2 or len(g) < 2:
        raise ValueError("need at least two uploads of equal length")
    std = g.std(axis=1)
    if np.any(std == 0):
        raise DegenerateUploadError(f"upload {int(np.argmax(std == 0))} has zero element std")
    lo, hi = g.min(axis=0), g.max(axis=0)
    gap = np.maximum(g - lo, hi - g).max(axis=1)
    return float(np.max(gap / (K * std)))


def add_noise(v: np.ndarray, scale: NoiseScale, seed: int | np.random.Generator) -> np.ndarray:
    """v + n with n i.i.d. N(0, (sigma R std)^2)."""
    v = np.asarray(v, dtype=np.float64)
    s = scale.noise_std
    if s == 0.0:
        return v.copy()
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed, "noise")
    return v + rng.normal(0.0, s, size=v.shape)


class UploadNoise:
    """Per-client noise hook: each upload gets std sigma * R * std(upload)."""

    def __init__(self, sigma: float, R: float, seed: int):
        self.sigma, self.R, self.seed = sigma, R, seed
        self._rngs: dict[int, np.random.Generator] = {}

    def __call__(self, v: np.ndarray, u: int) -> np.ndarray:
        if self.sigma == 0.0:
            return v
        rng = self._rngs.setdefault(u, stream(self.seed, "noise", u))
        return add_noise(v, NoiseScale(self.sigma, self.R, float(np.std(v))), rng)


def calibration_uploads(protocol: str, arch: nn.Architecture, extractor: nn.ParamVector, dataset: Dataset,
                        partition: ClientPartition, cfg: RoundConfig) -> tuple[np.ndarray, int]:
    """Noise-free uploads at the initial parameters, plus the K that divides R.

    FedAvg variants: one g_u per client (K = K_u). FbFTL: one z per sample (K = 1).
    """
    params = nn.init_params(arch, cfg.seed)
    if protocol != "fl" and arch.cut_index > 1:
        lo = len(extractor.slice(1, arch.cut_index - 1).values)
        params.values[:lo] = extractor.slice(1, arch.cut_index - 1).values
    if protocol == "fbftl":
        ext = params.slice(1, arch.cut_index - 1) if arch.cut_index > 1 else None
        idx = np.concatenate(partition.assignments)
        z = nn.forward(arch, ext, dataset.x[idx])[0] if ext is not None else dataset.x[idx]
        return z, 1
    first = arch.cut_index if protocol == "ftl_head" else 1
    work = params.slice(first, arch.M)
    rows = []
    for idx in partition.assignments:
        x = dataset.x[idx]
        if first > 1:
            x = nn.forward(arch, params.slice(1, first - 1), x)[0]
        g, _ = client_update(arch, work, x, dataset.y[idx])
        rows.append(g.values)
    return np.stack(rows), cfg.K


def dp_run(protocol: str, dp: DpConfig, arch: nn.Architecture, extractor: nn.ParamVector | None, dataset: Dataset,
           partition: ClientPartition, cfg: RoundConfig, *, val: Dataset | None = None, sigma: float | None = None) -> TrainRun:
    """Run ``protocol`` with every upload noised before the server sees it.

    FedAvg variants are calibrated with the run's C and I; FbFTL uploads each
    sample once, so it uses C = 1 and I = 1. ``sigma`` overrides the bound.
    A divergent run is reported with accuracy 0 rather than raised.
    """
    if extractor is None:
        extractor = nn.ParamVector(np.zeros(0), (), 1)
    C, I = (1.0, 1) if protocol == "fbftl" else (cfg.C, cfg.I)
    report = sigma_bound(dp, C, I)
    s = report.sigma if sigma is None else sigma
    uploads, k_div = calibration_uploads(protocol, arch, extractor, dataset, partition, cfg)
    R = max_relative_distance(uploads, k_div) if s > 0 else 0.0
    noise = UploadNoise(s, R, cfg.seed) if s > 0 else None
    info = {"dp": {"epsilon": dp.epsilon, "delta": dp.delta, "sigma": s, "R": R, "bound_applicable": report.applicable,
                   "note": CONSTANTS_NOTE, "diverged": False}}
    try:
        run = run_protocol(protocol, arch, extractor, dataset, partition, cfg, val=val, noise=noise)
    except DivergenceError as exc:
        run = TrainRun(protocol, nn.init_params(arch, cfg.seed))
        run.metrics.append({"iteration": exc.iteration, "train_loss": None, "val_accuracy": 0.0})
        info["dp"]["diverged"] = True
        info["dp"]["divergence"] = f"{exc} (iteration {exc.iteration}, sigma {s:g})"
    run.extra.update(info)
    return run
