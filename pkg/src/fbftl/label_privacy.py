"""Entropy of a client's label multiset (its batch type) and the leakage terms.

A batch type is the count vector ``(n_1, ..., n_N)`` of one client's ``K``
labels. Under a label distribution ``p`` the type is multinomial, so

    P(b) = K! / prod(n_a!) * prod(p_a ** n_a).

All entropies are in bits with ``0 * log 0 = 0``. Leakages are signed.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import SizeError
from .seeds import stream

ENUMERATION_CAP = 10**8
_MAX_COUNT = 2**128


def num_batch_types(N: int, K: int) -> int:
    """|B| = C(N + K - 1, K)."""
    if N < 1 or K < 1:
        raise ValueError("N and K must be >= 1")
    # reject hopeless sizes before computing a huge exact binomial
    log2_estimate = (math.lgamma(N + K) - math.lgamma(K + 1) - math.lgamma(N)) / math.log(2)
    if log2_estimate > 130:
        raise SizeError(f"|B| = C({N + K - 1}, {K}) exceeds 128 bits")
    count = math.comb(N + K - 1, K)
    if count >= _MAX_COUNT:
        raise SizeError(f"|B| = C({N + K - 1}, {K}) exceeds 128 bits")
    return count


def enumerate_batch_types(N: int, K: int, cap: int = ENUMERATION_CAP) -> Iterator[tuple[int, ...]]:
    """All compositions of K into N parts, first count descending: (2,0), (1,1), (0,2)."""
    size = num_batch_types(N, K)
    if size > cap:
        raise SizeError(f"|B| = {size} exceeds the enumeration cap {cap}")
    return _compositions(N, K)


def _compositions(N: int, K: int) -> Iterator[tuple[int, ...]]:
    if N == 1:
        yield (K,)
        return
    for first in range(K, -1, -1):
        for rest in _compositions(N - 1, K - first):
            yield (first,) + rest


def _check_dist(p: Sequence[float], N: int | None = None) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("label distribution must be nonnegative and sum to 1")
    if N is not None and len(p) != N:
        raise ValueError(f"distribution has {len(p)} classes, expected {N}")
    return p


def uniform(N: int) -> np.ndarray:
    return np.full(N, 1.0 / N)


def log_multinomial_coefficient(counts: Sequence[int]) -> float:
    """ln(K! / prod n_a!); exact integers up to K = 20, log-gamma beyond."""
    K = int(sum(counts))
    if K <= 20:
        coef = math.factorial(K)
        for n in counts:
            coef //= math.factorial(int(n))
        return math.log(coef)
    return math.lgamma(K + 1) - sum(math.lgamma(int(n) + 1) for n in counts)


def batch_prob(b: Sequence[int], p: Sequence[float]) -> float:
    p = _check_dist(p, len(b))
    if any(n < 0 for n in b):
        raise ValueError("counts must be nonnegative")
    log_p = log_multinomial_coefficient(b)
    for n, pa in zip(b, p):
        if n == 0:
            continue
        if pa == 0.0:
            return 0.0
        log_p += n * math.log(pa)
    return math.exp(log_p)


def _type_blocks(N: int, K: int, chunk: int) -> Iterator[np.ndarray]:
    """All batch types in blocks, via stars and bars (bar positions among N+K-1 slots)."""
    if N == 1:
        yield np.array([[K]], dtype=np.int64)
        return
    combos = itertools.combinations(range(N + K - 1), N - 1)
    while True:
        bars = np.array(list(itertools.islice(combos, chunk)), dtype=np.int64).reshape(-1, N - 1)
        if len(bars) == 0:
            return
        edges = np.hstack([np.full((len(bars), 1), -1), bars, np.full((len(bars), 1), N + K - 1)])
        yield np.diff(edges, axis=1) - 1


def _entropy_enumerated(N: int, K: int, p: np.ndarray, cap: int, chunk: int = 100_000) -> float:
    size = num_batch_types(N, K)
    if size > cap:
        raise SizeError(f"|B| = {size} exceeds the enumeration cap {cap}")
    exact = K <= 20
    if exact:
        fact = np.array([math.factorial(i) for i in range(K + 1)], dtype=np.int64)
    lg = np.array([math.lgamma(i + 1) for i in range(K + 1)])
    log_p = np.log(np.where(p > 0, p, 1.0))
    impossible = p == 0
    h = 0.0
    for block in _type_blocks(N, K, chunk):
        if exact:
            # integer multinomial coefficients keep simple cases exact
            coef = fact[K] // np.prod(fact[block], axis=1)
            probs = coef * np.prod(p[None, :] ** block, axis=1)
        else:
            probs = np.exp(lg[K] - lg[block].sum(axis=1) + block @ log_p)
        probs[(block[:, impossible] > 0).any(axis=1)] = 0.0
        probs = probs[probs > 0]
        h -= float(np.sum(probs * np.log2(probs)))
    return h


def _expected_log_factorial(K: int, pa: float) -> float:
    """E[ln n!] for n ~ Binomial(K, pa)."""
    if pa <= 0.0:
        return 0.0
    if pa >= 1.0:
        return math.lgamma(K + 1)
    n = np.arange(K + 1)
    lg = np.array([math.lgamma(i + 1) for i in range(K + 2)])
    log_pmf = lg[K] - lg[n] - lg[K - n] + n * math.log(pa) + (K - n) * math.log1p(-pa)
    return float(np.sum(np.exp(log_pmf) * lg[n]))


def entropy_closed_form(N: int, K: int, p: Sequence[float]) -> float:
    """Multinomial entropy without enumerating types.

    -E[ln P(b)] = -ln K! + sum_a E[ln n_a!] - K sum_a p_a ln p_a, where each
    n_a is Binomial(K, p_a) marginally. Result converted to bits.
    """
    p = _check_dist(p, N)
    nats = -math.lgamma(K + 1)
    for pa in p:
        nats += _expected_log_factorial(K, float(pa))
        if pa > 0:
            nats -= K * pa * math.log(pa)
    return max(nats, 0.0) / math.log(2)


def entropy_given_dist(N: int, K: int, p: Sequence[float] | None = None, method: str = "auto", cap: int = ENUMERATION_CAP) -> float:
    """H(B | p) in bits.

    ``method="enumerate"`` sums over every batch type (size error past the cap),
    ``"closed_form"`` uses binomial marginals, ``"auto"`` enumerates when the
    type count is within ``cap`` and falls back to the closed form otherwise.
    """
    p = uniform(N) if p is None else _check_dist(p, N)
    if method == "closed_form":
        return entropy_closed_form(N, K, p)
    if method == "enumerate" or num_batch_types(N, K) <= cap:
        return _entropy_enumerated(N, K, p, cap)
    if method != "auto":
        raise ValueError(f"unknown method {method!r}")
    return entropy_closed_form(N, K, p)


def leakage_statistical(N: int, K: int, p_true: Sequence[float], **kw) -> float:
    """H(B | uniform) - H(B | p_true); may be negative."""
    return entropy_given_dist(N, K, uniform(N), **kw) - entropy_given_dist(N, K, p_true, **kw)


# --------------------------------------------------------------------------- censuses


@dataclass(frozen=True)
class BatchCensus:
    """Counts c(b) of each batch type among U shuffled uploads.

    ``types`` is a (n_types, N) array of count vectors; ``counts`` holds c(b).
    """

    N: int
    K: int
    types: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        if self.types.ndim != 2 or self.types.shape[1] != self.N:
            raise ValueError("types must be an (n, N) array")
        if len(self.counts) != len(self.types) or np.any(self.counts < 0):
            raise ValueError("counts must be nonnegative, one per type")
        if len(self.types) and np.any(self.types.sum(axis=1) != self.K):
            raise ValueError("every batch type must sum to K")

    @property
    def U(self) -> int:
        return int(self.counts.sum())

    def frequencies(self) -> dict[tuple[int, ...], float]:
        return {tuple(int(v) for v in t): c / self.U for t, c in zip(self.types, self.counts) if c > 0}

    @classmethod
    def from_counts(cls, rows, N: int) -> "BatchCensus":
        """Census from per-client count vectors."""
        rows = np.atleast_2d(np.asarray(rows, dtype=np.int64))
        types, counts = np.unique(rows, axis=0, return_counts=True)
        return cls(N, int(rows[0].sum()), types, counts)

    @classmethod
    def from_label_batches(cls, label_batches, N: int) -> "BatchCensus":
        rows = np.stack([np.bincount(np.asarray(b, dtype=np.int64), minlength=N) for b in label_batches])
        types, counts = np.unique(rows, axis=0, return_counts=True)
        return cls(N, int(rows[0].sum()), types, counts)


def _bin_rows(rows: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    N = rows.shape[1]
    if (K + 1) ** N < 2**62:
        # mixed-radix code per row is much faster than a row-wise unique
        radix = (K + 1) ** np.arange(N - 1, -1, -1, dtype=np.int64)
        codes, counts = np.unique(rows @ radix, return_counts=True)
        types = (codes[:, None] // radix[None, :]) % (K + 1)
        return types, counts
    return np.unique(rows, axis=0, return_counts=True)


def simulate_census(N: int, K: int, U: int, p: Sequence[float] | None, seed: int, chunk: int = 200_000) -> BatchCensus:
    """U batches of K i.i.d. labels drawn from p, binned into batch types."""
    if U < 1:
        raise ValueError("U must be >= 1")
    p = uniform(N) if p is None else _check_dist(p, N)
    rng = stream(seed, "census")
    totals: dict[tuple[int, ...], int] = {}
    done = 0
    while done < U:
        n = min(chunk, U - done)
        rows = rng.multinomial(K, p, size=n)
        types, counts = _bin_rows(rows, K)
        for t, c in zip(map(tuple, types.tolist()), counts.tolist()):
            totals[t] = totals.get(t, 0) + c
        done += n
    keys = sorted(totals, reverse=True)
    return BatchCensus(N, K, np.array(keys, dtype=np.int64), np.array([totals[k] for k in keys], dtype=np.int64))


def empirical_entropy(census: BatchCensus) -> float:
    """-sum over seen types of (c/U) log2(c/U)."""
    if census.U < 1:
        raise ValueError("census is empty")
    f = census.counts[census.counts > 0] / census.U
    return float(-np.sum(f * np.log2(f))) + 0.0


def _check_census(census: BatchCensus, N: int, K: int) -> None:
    if census.N != N or census.K != K:
        raise ValueError(f"census is over (N={census.N}, K={census.K}), expected (N={N}, K={K})")


def leakage_query(N: int, K: int, p_true: Sequence[float], census: BatchCensus, **kw) -> float:
    """H(B | p_true) minus the census entropy."""
    _check_census(census, N, K)
    return entropy_given_dist(N, K, p_true, **kw) - empirical_entropy(census)


def total_leakage(N: int, K: int, census: BatchCensus, **kw) -> float:
    """H(B | uniform) minus the census entropy; equals statistical + query leakage."""
    _check_census(census, N, K)
    return entropy_given_dist(N, K, uniform(N), **kw) - empirical_entropy(census)


def census_posterior(census: BatchCensus) -> dict[tuple[int, ...], float]:
    """Posterior of a target client's batch type given the shuffled census: c(b)/U."""
    return census.frequencies()


def leakage_sweep(N: int, total_samples: int, Ks: Sequence[int], seed: int, p: Sequence[float] | None = None) -> list[dict]:
    """Rows (K, U, H_uni, H_emp, L_s, L_q, L_t) at fixed U*K, through the empirical path."""
    p = uniform(N) if p is None else _check_dist(p, N)
    rows = []
    for K in Ks:
        U = total_samples // K
        if U < 1:
            raise ValueError(f"K={K} leaves no clients at U*K={total_samples}")
        census = simulate_census(N, K, U, p, seed)
        h_uni = entropy_given_dist(N, K, uniform(N))
        h_true = h_uni if np.array_equal(p, uniform(N)) else entropy_given_dist(N, K, p)
        h_emp = empirical_entropy(census)
        rows.append({
            "K": K, "U": U, "H_uni": h_uni, "H_true": h_true, "H_emp": h_emp,
            "L_s": h_uni - h_true, "L_q": h_true - h_emp, "L_t": h_uni - h_emp,
            "negative_L_s": h_uni - h_true < 0,
        })
    return rows
