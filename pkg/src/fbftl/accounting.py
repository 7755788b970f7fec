"""Closed-form uplink/downlink/complexity calculators and the live run ledger.

Formulas take either an iteration count ``I`` (one upload per selected client
per iteration, ``U*C`` clients per iteration) or a total upload-batch count,
which is what the VGG-16 reference table reports.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from . import nn
from .errors import ConfigError

METHODS = ("fl", "ftl_full", "ftl_head", "fbftl")


def label_bits(num_classes: int) -> int:
    """Bits to send one class index: ceil(log2 N)."""
    return max(0, math.ceil(math.log2(num_classes))) if num_classes > 1 else 0


def clients_per_iteration(U: int, C: float) -> int:
    return max(1, math.ceil(U * C - 1e-9))


@dataclass(frozen=True)
class ParamCounts:
    """Parameter counts without a full architecture (for the reference table).

    ``total`` = sum over all trainable layers, ``head`` = sum from the cut
    layer on, ``feature_width`` = N^-_{m_c}. Optional per-sample forward
    multiplication counts enable the complexity row.
    """

    total: int
    head: int
    feature_width: int
    num_classes: int = 10
    extractor_mults: int | None = None
    head_mults: int | None = None

    @property
    def extractor(self) -> int:
        return self.total - self.head

    @classmethod
    def from_arch(cls, arch: nn.Architecture) -> "ParamCounts":
        return cls(
            total=nn.count_params(arch),
            head=nn.count_params(arch, arch.cut_index),
            feature_width=arch.feature_width,
            num_classes=arch.num_classes,
            extractor_mults=nn.complexity(arch, 1, arch.cut_index - 1),
            head_mults=nn.complexity(arch, arch.cut_index),
        )


@dataclass(frozen=True)
class MethodConfig:
    method: str
    counts: ParamCounts | None
    d: int = 32
    I: int | None = None
    batches: int | None = None
    U: int = 1
    C: float = 1.0
    K: int = 1
    count_labels: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}", "method")
        if self.counts is None:
            raise ConfigError("parameter counts / architecture are required", "arch")
        if self.d < 1 or self.U < 1 or self.K < 1 or not 0 < self.C <= 1:
            raise ConfigError("d, U, K must be positive and 0 < C <= 1")

    @classmethod
    def for_arch(cls, method: str, arch: nn.Architecture, **kw) -> "MethodConfig":
        return cls(method, ParamCounts.from_arch(arch), **kw)

    @property
    def total_samples(self) -> int:
        return self.U * self.K

    @property
    def upload_batches(self) -> float:
        """I*U*C for gradient methods, sum of K_u for FbFTL."""
        if self.method == "fbftl":
            return self.total_samples if self.batches is None else self.batches
        if self.batches is not None:
            return self.batches
        if self.I is None:
            raise ConfigError("need I or batches", "I")
        return self.I * clients_per_iteration(self.U, self.C)

    @property
    def iterations(self) -> float:
        if self.I is not None:
            return self.I
        return self.upload_batches / clients_per_iteration(self.U, self.C)


def params_per_batch(mcfg: MethodConfig) -> int:
    c = mcfg.counts
    return {"fl": c.total, "ftl_full": c.total, "ftl_head": c.head, "fbftl": c.feature_width}[mcfg.method]


def bits_per_batch(mcfg: MethodConfig) -> int:
    bits = mcfg.d * params_per_batch(mcfg)
    if mcfg.method == "fbftl" and mcfg.count_labels:
        bits += label_bits(mcfg.counts.num_classes)
    return bits


def uplink_formula(mcfg: MethodConfig) -> float:
    """Total uplink bits: d*I*U*C*sum(T) for gradient methods, d*sum(K_u)*N^-_{m_c} for FbFTL."""
    return bits_per_batch(mcfg) * mcfg.upload_batches


def downlink_formula(mcfg: MethodConfig) -> float:
    """Full-model broadcast per iteration, or the one-time extractor broadcast for FbFTL."""
    c = mcfg.counts
    if mcfg.method == "fbftl":
        return mcfg.d * c.extractor
    return mcfg.d * mcfg.iterations * c.total


def complexity_formula(mcfg: MethodConfig) -> float:
    """Client multiplication count.

    Per upload batch a client processes K samples, so every term carries a
    factor K (the reference counts for VGG-16 imply the same).
    """
    c = mcfg.counts
    if c.extractor_mults is None or c.head_mults is None:
        raise ConfigError("per-sample multiplication counts are unavailable", "arch")
    K, U = mcfg.K, mcfg.U
    full = c.extractor_mults + c.head_mults
    if mcfg.method in ("fl", "ftl_full"):
        return 2 * mcfg.upload_batches * K * full
    if mcfg.method == "ftl_head":
        return U * K * c.extractor_mults + 2 * mcfg.upload_batches * K * c.head_mults
    return U * K * c.extractor_mults


def per_sample_upload_ratio(arch: nn.Architecture) -> tuple[float, int]:
    """(sum_{m>=m_c} T_m / N^-_{m_c}, N^+_{m_c}): the first always exceeds the second."""
    head = nn.count_params(arch, arch.cut_index)
    return head / arch.feature_width, arch.layers[arch.cut_position].output_nodes


def payload_ratio_bound(arch: nn.Architecture, I: int, U: int, C: float, K: int) -> tuple[float, float]:
    """(P^{FTL_c} / P^{FbFTL}, lower bound I*U*C/sum(K_u) * N^+_{m_c}).

    Label bits are excluded here, matching the pure parameter-count ratio.
    """
    counts = ParamCounts.from_arch(arch)
    ftl = MethodConfig("ftl_head", counts, I=I, U=U, C=C, K=K, count_labels=False)
    fb = MethodConfig("fbftl", counts, U=U, C=C, K=K, count_labels=False)
    ratio = uplink_formula(ftl) / uplink_formula(fb)
    n_out = arch.layers[arch.cut_position].output_nodes
    bound = ftl.upload_batches / (U * K) * n_out
    assert ratio > bound, (ratio, bound)
    return ratio, bound


# --------------------------------------------------------------------------- ledgers


@dataclass
class PayloadLedger:
    uplink_bits: int = 0
    downlink_bits: int = 0
    uplink_batches: int = 0
    delivered_batches: int = 0
    lost_batches: int = 0
    retransmitted_blocks: int = 0
    batch_sizes: Counter = field(default_factory=Counter)

    def upload(self, bits: int, delivered: bool = True, sent_bits: int | None = None, retransmitted_blocks: int = 0) -> None:
        """Record one packet; ``sent_bits`` covers retransmissions when a channel is active."""
        if bits < 0 or retransmitted_blocks < 0:
            raise ValueError("ledger counters must not decrease")
        self.uplink_bits += int(bits if sent_bits is None else sent_bits)
        self.uplink_batches += 1
        self.delivered_batches += int(delivered)
        self.lost_batches += int(not delivered)
        self.retransmitted_blocks += int(retransmitted_blocks)
        self.batch_sizes[int(bits)] += 1

    def broadcast(self, bits: int) -> None:
        if bits < 0:
            raise ValueError("ledger counters must not decrease")
        self.downlink_bits += int(bits)

    def to_dict(self) -> dict:
        return {
            "uplink_bits": self.uplink_bits,
            "downlink_bits": self.downlink_bits,
            "uplink_batches": self.uplink_batches,
            "delivered_batches": self.delivered_batches,
            "lost_batches": self.lost_batches,
            "retransmitted_blocks": self.retransmitted_blocks,
            "batch_size_histogram": {str(k): v for k, v in sorted(self.batch_sizes.items())},
        }


@dataclass
class ComplexityLedger:
    client_multiplications: Counter = field(default_factory=Counter)
    server_multiplications: int = 0

    def client(self, u: int, mults: int) -> None:
        if mults < 0:
            raise ValueError("ledger counters must not decrease")
        self.client_multiplications[int(u)] += int(mults)

    def server(self, mults: int) -> None:
        if mults < 0:
            raise ValueError("ledger counters must not decrease")
        self.server_multiplications += int(mults)

    @property
    def client_total(self) -> int:
        return sum(self.client_multiplications.values())

    def to_dict(self) -> dict:
        return {
            "client_total": self.client_total,
            "server_multiplications": self.server_multiplications,
            "clients_active": len(self.client_multiplications),
        }


# --------------------------------------------------------------------------- rendering

_UNITS = (("Tb", 1e12), ("Gb", 1e9), ("Mb", 1e6), ("Kb", 1e3))


def render_bits(bits: float, sig: int = 2) -> str:
    """Decimal unit string, e.g. 4.9e9 -> '4.9 Gb'.

    Values with at least three integer digits in their unit are shown as
    whole numbers (``3216 Tb``, ``131 Kb``), like the reference table.
    """
    for unit, scale in _UNITS:
        if bits >= scale:
            v = bits / scale
            if v >= 100:
                return f"{v:.0f} {unit}"
            digits = max(0, sig - 1 - int(math.floor(math.log10(v))))
            return f"{v:.{digits}f} {unit}"
    return f"{bits:.0f} b"
