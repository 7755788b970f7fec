"""I.i.d. block-loss channel with whole-packet retransmission."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class ChannelModel:
    blr: float = 0.0
    block_bits: int = 131_072
    n_r: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.blr <= 1.0:
            raise ConfigError("blr must lie in [0, 1]", "channel.blr")
        if self.block_bits < 1:
            raise ConfigError("block_bits must be >= 1", "channel.block_bits")
        if self.n_r < 0:
            raise ConfigError("n_r must be >= 0", "channel.n_r")


@dataclass(frozen=True)
class Outcome:
    delivered: bool
    blocks_sent: int
    attempts: int


def packet_blocks(batch_bits: int, block_bits: int) -> int:
    if batch_bits <= 0 or block_bits <= 0:
        raise ValueError("sizes must be positive")
    return -(-int(batch_bits) // int(block_bits))


def plr(blr: float, n_b: int) -> float:
    """Packet loss rate without retransmission: 1 - (1 - BLR)^n_b."""
    if blr >= 1.0:
        return 1.0 if n_b > 0 else 0.0
    # log1p/expm1 keep precision for tiny BLR
    return -math.expm1(n_b * math.log1p(-blr))


def plr_retx(blr: float, n_b: int, n_r: int) -> float:
    """Probability that all 1 + n_r attempts fail."""
    return plr(blr, n_b) ** (n_r + 1)


def expected_payload_retx(P: float, blr: float, n_r: int) -> float:
    """Expected uplink payload P * sum_{n=0}^{n_r} BLR^n."""
    return P * sum(blr**n for n in range(n_r + 1))


def transmit(batch_bits: int, ch: ChannelModel, rng: np.random.Generator) -> Outcome:
    """Send one packet; every attempt resends all of its blocks."""
    n_b = packet_blocks(batch_bits, ch.block_bits)
    sent = 0
    for attempt in range(ch.n_r + 1):
        sent += n_b
        # number of lost blocks among n_b independent Bernoulli(BLR) draws
        if ch.blr == 0.0 or rng.binomial(n_b, ch.blr) == 0:
            return Outcome(True, sent, attempt + 1)
    return Outcome(False, sent, ch.n_r + 1)


def transmit_blockwise(batch_bits: int, ch: ChannelModel, rng: np.random.Generator) -> Outcome:
    """Reference path drawing each block's fate separately (slow; used to cross-check)."""
    n_b = packet_blocks(batch_bits, ch.block_bits)
    sent = 0
    for attempt in range(ch.n_r + 1):
        sent += n_b
        if not np.any(rng.random(n_b) < ch.blr):
            return Outcome(True, sent, attempt + 1)
    return Outcome(False, sent, ch.n_r + 1)


def simulate_loss_rate(batch_bits: int, ch: ChannelModel, trials: int, rng: np.random.Generator) -> tuple[float, float]:
    """Vectorized Monte Carlo: (loss rate, mean attempts) over ``trials`` packets.

    Each attempt's outcome is the OR of n_b Bernoulli(BLR) block losses,
    sampled exactly as Binomial(n_b, BLR) > 0.
    """
    n_b = packet_blocks(batch_bits, ch.block_bits)
    alive = np.ones(trials, dtype=bool)
    attempts = np.zeros(trials, dtype=np.int64)
    for _ in range(ch.n_r + 1):
        attempts[alive] += 1
        lost_blocks = rng.binomial(n_b, ch.blr, size=int(alive.sum()))
        idx = np.flatnonzero(alive)
        alive[idx[lost_blocks == 0]] = False
    return float(alive.mean()), float(attempts.mean())


def plr_table(blrs, batch_bits: dict[str, int], block_bits: int) -> list[dict]:
    """(method, blr, n_b, plr) rows for a BLR sweep."""
    rows = []
    for name, bits in batch_bits.items():
        n_b = packet_blocks(bits, block_bits)
        for blr in blrs:
            rows.append({"method": name, "blr": blr, "n_b": n_b, "plr": plr(blr, n_b)})
    return rows


def expected_attempts(blr: float, n_b: int, n_r: int) -> float:
    """Mean number of packet attempts under whole-packet retry: sum_{n=0}^{n_r} PLR^n."""
    p = plr(blr, n_b)
    return sum(p**n for n in range(n_r + 1))
