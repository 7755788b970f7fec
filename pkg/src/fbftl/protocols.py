"""FedAvg FL, FTL (full / head) and FbFTL between a parameter server and clients.

All four protocols meter every broadcast and upload in a ``PayloadLedger`` and
every client multiplication in a ``ComplexityLedger``. Randomness comes from
named substreams of ``RoundConfig.seed``: ``selection`` (clients per
iteration), ``channel`` (block losses), ``noise`` (per-client DP noise),
``shuffle`` (upload shuffling) and ``server`` (FbFTL mini-batches).
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .accounting import ComplexityLedger, PayloadLedger, clients_per_iteration, label_bits
from .channel import ChannelModel, transmit
from .compression import CompressionConfig, ErrorMemory, compress_features, compressed_bits
from .data import ClientPartition, Dataset
from .errors import ConfigError, DivergenceError
from .seeds import stream

PROTOCOLS = ("fl", "ftl_full", "ftl_head", "fbftl")

# (vector, client index) -> noised vector
NoiseFn = Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class RoundConfig:
    """``U`` clients of ``K`` samples each; a fraction ``C`` is selected per
    iteration for at most ``I`` iterations at learning rate ``lr``."""

    U: int
    C: float
    K: int
    lr: float
    I: int
    seed: int = 0
    d: int = 32
    sgd_minibatch: int | None = None
    reshuffle: bool = True
    schedule: str = "shuffle"
    patience: int | None = 10
    min_delta: float = 1e-3
    eval_every: int = 1
    keep_snapshots: bool = False

    def __post_init__(self):
        if not 0 < self.C <= 1:
            raise ConfigError(f"C={self.C} must satisfy 0 < C <= 1", "round.C")
        if self.U < 1:
            raise ConfigError("U must be >= 1", "round.U")
        if self.K < 1:
            raise ConfigError("K must be >= 1", "round.K")
        if self.I < 0:
            raise ConfigError("I must be >= 0", "round.I")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0", "round.lr")
        if self.schedule not in ("shuffle", "clients"):
            raise ConfigError(f"unknown schedule {self.schedule!r}", "round.schedule")
        if self.sgd_minibatch is not None and self.sgd_minibatch < 1:
            raise ConfigError("sgd_minibatch must be >= 1", "round.sgd_minibatch")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1", "round.eval_every")

    @property
    def clients_per_iteration(self) -> int:
        return clients_per_iteration(self.U, self.C)

    @property
    def minibatch(self) -> int:
        return self.sgd_minibatch or self.clients_per_iteration * self.K


@dataclass
class UploadBatch:
    """One uplink packet: a gradient sum or a (feature, label) pair."""

    origin: int | None
    kind: str
    payload: np.ndarray
    label: int | None
    bit_size: int


@dataclass
class TrainRun:
    method: str
    params: nn.ParamVector
    metrics: list[dict] = field(default_factory=list)
    ledger: PayloadLedger = field(default_factory=PayloadLedger)
    complexity: ComplexityLedger = field(default_factory=ComplexityLedger)
    snapshots: list[np.ndarray] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(self.metrics)

    @property
    def final_accuracy(self) -> float | None:
        for row in reversed(self.metrics):
            if row.get("val_accuracy") is not None:
                return row["val_accuracy"]
        return None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "config": self.config,
            "iterations": self.iterations,
            "final_accuracy": self.final_accuracy,
            "metrics": self.metrics,
            "ledger": self.ledger.to_dict(),
            "complexity": self.complexity.to_dict(),
            **self.extra,
        }


# --------------------------------------------------------------------------- helpers


def client_update(arch: nn.Architecture, params: nn.ParamVector, x: np.ndarray, y: np.ndarray, scope: str = "full") -> tuple[nn.ParamVector, float]:
    """g_u = sum over the client's samples of the loss gradient, plus the mean loss.

    For ``scope="head"`` the inputs may be features z with head-only params.
    """
    probs, cache = nn.forward(arch, params, x)
    losses = nn.loss(probs, y)
    grad = nn.backward(arch, params, cache, y, scope)
    if not np.all(np.isfinite(grad.values)):
        raise DivergenceError("non-finite gradient")
    return grad, float(np.mean(losses))


def shuffle_uploads(batches: list[UploadBatch], seed: int) -> list[UploadBatch]:
    """Uniformly random order with the client origin stripped."""
    if not batches:
        raise ValueError("nothing to shuffle")
    order = stream(seed, "shuffle").permutation(len(batches))
    return [UploadBatch(None, batches[i].kind, batches[i].payload, batches[i].label, batches[i].bit_size) for i in order]


class _Uplink:
    """Applies DP noise, compression and the channel to one upload, and meters it."""

    def __init__(self, cfg: RoundConfig, ledger: PayloadLedger, channel: ChannelModel | None,
                 compression: CompressionConfig | None, noise: NoiseFn | None, size: int, feedback: bool):
        self.cfg, self.ledger, self.channel = cfg, ledger, channel
        self.compression, self.noise = compression, noise
        self.rng = stream(cfg.seed, "channel")
        self.feedback = feedback and compression is not None and compression.error_feedback
        self.memories: dict[int, ErrorMemory] = {}
        self.size = size

    def send(self, vec: np.ndarray, u: int, extra_bits: int = 0) -> tuple[np.ndarray, bool, int]:
        if self.noise is not None:
            vec = self.noise(vec, u)
        if self.compression is not None:
            if self.feedback:
                mem = self.memories.setdefault(u, ErrorMemory(self.size))
                vec = mem.step(vec, self.compression)
            else:
                vec = compress_features(vec, self.compression)
            bits = compressed_bits(vec, self.compression, self.cfg.d)
        else:
            bits = self.cfg.d * len(vec)
        bits += extra_bits
        if self.channel is None:
            self.ledger.upload(bits)
            return vec, True, bits
        out = transmit(bits, self.channel, self.rng)
        sent_bits = bits * out.attempts
        retx = out.blocks_sent - out.blocks_sent // out.attempts
        self.ledger.upload(bits, out.delivered, sent_bits, retx)
        return vec, out.delivered, bits


def _evaluate(arch, params, val: Dataset | None) -> float | None:
    if val is None or len(val) == 0:
        return None
    return nn.accuracy(arch, params, val.x, val.y)


class _Stopper:
    def __init__(self, patience: int | None, min_delta: float):
        self.patience, self.min_delta = patience, min_delta
        self.best, self.stale = -math.inf, 0

    def update(self, acc: float | None) -> bool:
        if self.patience is None or acc is None:
            return False
        if acc >= self.best + self.min_delta:
            self.best, self.stale = acc, 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def _config_echo(cfg: RoundConfig, **extra) -> dict:
    out = asdict(cfg)
    out.update({k: (asdict(v) if hasattr(v, "__dataclass_fields__") else v) for k, v in extra.items()})
    return out


# --------------------------------------------------------------------------- FedAvg family


def _quiet(fn):
    """Overflow under heavy noise is reported as DivergenceError, not as warnings."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with np.errstate(over="ignore", invalid="ignore"):
            return fn(*args, **kwargs)

    return wrapper


@_quiet
def _run_fedavg(
    method: str,
    arch: nn.Architecture,
    params: nn.ParamVector,
    dataset: Dataset,
    partition: ClientPartition,
    cfg: RoundConfig,
    scope: str,
    val: Dataset | None,
    channel: ChannelModel | None,
    compression: CompressionConfig | None,
    noise: NoiseFn | None,
) -> TrainRun:
    if partition.U != cfg.U:
        raise ConfigError(f"partition has {partition.U} clients but round.U={cfg.U}", "round.U")
    first = 1 if scope == "full" else arch.cut_index
    n_up = nn.count_params(arch, first)
    full_bits = cfg.d * nn.count_params(arch)
    pass_mults = nn.complexity(arch, first, arch.M, "forward+backward")
    run = TrainRun(method, params.copy(), config=_config_echo(cfg, scope=scope, channel=channel, compression=compression))
    uplink = _Uplink(cfg, run.ledger, channel, compression, noise, n_up, feedback=True)
    sel_rng = stream(cfg.seed, "selection")
    stopper = _Stopper(cfg.patience, cfg.min_delta)

    head = run.params.slice(first, arch.M) if scope == "head" else run.params
    feats: dict[int, np.ndarray] = {}
    if scope == "head":
        # clients run the frozen extractor once per sample and keep z locally
        ext_mults = nn.complexity(arch, 1, arch.cut_index - 1)
        extractor = run.params.slice(1, arch.cut_index - 1) if arch.cut_index > 1 else None
        for u, idx in enumerate(partition.assignments):
            x = dataset.x[idx]
            feats[u] = nn.forward(arch, extractor, x)[0] if extractor is not None else x
            run.complexity.client(u, len(idx) * ext_mults)

    for it in range(cfg.I):
        run.ledger.broadcast(full_bits)
        chosen = np.sort(sel_rng.choice(cfg.U, cfg.clients_per_iteration, replace=False))
        step = np.zeros(n_up)
        losses = []
        try:
            for u in chosen:
                idx = partition.assignments[u]
                x = feats[u] if scope == "head" else dataset.x[idx]
                g, l = client_update(arch, head, x, dataset.y[idx], "full")
                losses.append(l)
                run.complexity.client(u, len(idx) * pass_mults)
                vec, delivered, _ = uplink.send(g.values, int(u))
                if delivered:
                    step += (cfg.lr / len(idx)) * vec
        except DivergenceError as exc:
            raise DivergenceError(str(exc), it) from None
        head.values -= step
        if not np.all(np.isfinite(head.values)):
            raise DivergenceError("non-finite parameters", it)
        if cfg.keep_snapshots:
            run.snapshots.append(head.values.copy())
        full = _merge(run.params, head) if scope == "head" else head
        acc = _evaluate(arch, full, val) if (it + 1) % cfg.eval_every == 0 or it == cfg.I - 1 else None
        run.metrics.append({"iteration": it + 1, "train_loss": float(np.mean(losses)), "val_accuracy": acc})
        if stopper.update(acc):
            break
    run.params = _merge(run.params, head) if scope == "head" else head
    if not run.metrics:
        run.extra["initial_accuracy"] = _evaluate(arch, run.params, val)
    return run


def _merge(full: nn.ParamVector, part: nn.ParamVector) -> nn.ParamVector:
    out = full.copy()
    lo, _ = out.bounds(part.first_layer)
    out.values[lo : lo + len(part.values)] = part.values
    return out


def run_fl(
    arch: nn.Architecture,
    dataset: Dataset,
    partition: ClientPartition,
    cfg: RoundConfig,
    *,
    val: Dataset | None = None,
    channel: ChannelModel | None = None,
    compression: CompressionConfig | None = None,
    noise: NoiseFn | None = None,
) -> TrainRun:
    """FedAvg from a random initialization: theta <- theta - sum_u (lr/K_u) g_u."""
    params = nn.init_params(arch, cfg.seed)
    return _run_fedavg("fl", arch, params, dataset, partition, cfg, "full", val, channel, compression, noise)


def run_ftl(
    arch: nn.Architecture,
    extractor: nn.ParamVector,
    dataset: Dataset,
    partition: ClientPartition,
    cfg: RoundConfig,
    scope: str = "head",
    *,
    val: Dataset | None = None,
    channel: ChannelModel | None = None,
    compression: CompressionConfig | None = None,
    noise: NoiseFn | None = None,
) -> TrainRun:
    """FedAvg starting from a transferred extractor and a fresh head.

    ``scope="full"`` updates every layer (FTL_f); ``scope="head"`` freezes
    layers before the cut and uploads head gradients only (FTL_c).
    """
    if scope not in ("full", "head"):
        raise ConfigError(f"unknown scope {scope!r}", "scope")
    params = _with_head(arch, extractor, cfg.seed)
    method = "ftl_full" if scope == "full" else "ftl_head"
    return _run_fedavg(method, arch, params, dataset, partition, cfg, scope, val, channel, compression, noise)


def _with_head(arch: nn.Architecture, extractor: nn.ParamVector, seed: int) -> nn.ParamVector:
    head = nn.init_params(arch, seed, arch.cut_index)
    if arch.cut_index == 1:
        return head
    expected = nn.count_params(arch, 1, arch.cut_index - 1)
    if extractor.first_layer != 1 or len(extractor.values) < expected:
        raise ConfigError("extractor parameters do not cover layers 1..m_c-1")
    return nn.concat(extractor.slice(1, arch.cut_index - 1), head)


# --------------------------------------------------------------------------- FbFTL


@_quiet
def run_fbftl(
    arch: nn.Architecture,
    extractor: nn.ParamVector,
    dataset: Dataset,
    partition: ClientPartition,
    cfg: RoundConfig,
    *,
    val: Dataset | None = None,
    channel: ChannelModel | None = None,
    compression: CompressionConfig | None = None,
    noise: NoiseFn | None = None,
) -> TrainRun:
    """One-time (z, y) upload per sample, then head-only SGD at the server.

    Server step: theta2 <- theta2 - (lr/K) * sum over the mini-batch, which is
    the FTL_c update when the mini-batch holds exactly the samples of the
    selected clients (``schedule="clients"``). The default schedule draws
    shuffled mini-batches of ``cfg.minibatch`` pairs, reshuffling each epoch.
    """
    if partition.U != cfg.U:
        raise ConfigError(f"partition has {partition.U} clients but round.U={cfg.U}", "round.U")
    params = _with_head(arch, extractor, cfg.seed)
    run = TrainRun("fbftl", params, config=_config_echo(cfg, channel=channel, compression=compression))
    run.ledger.broadcast(cfg.d * nn.count_params(arch, 1, arch.cut_index - 1))

    ext = params.slice(1, arch.cut_index - 1) if arch.cut_index > 1 else None
    ext_mults = nn.complexity(arch, 1, arch.cut_index - 1)
    uplink = _Uplink(cfg, run.ledger, channel, compression, noise, arch.feature_width, feedback=False)
    lbits = label_bits(arch.num_classes)
    uploads: list[UploadBatch] = []
    for u, idx in enumerate(partition.assignments):
        x = dataset.x[idx]
        z = nn.forward(arch, ext, x)[0] if ext is not None else x
        run.complexity.client(u, len(idx) * ext_mults)
        for k, i in enumerate(idx):
            vec, delivered, bits = uplink.send(z[k], u, lbits)
            if delivered:
                uploads.append(UploadBatch(u, "feature_pair", vec, int(dataset.y[i]), bits))
    run.extra["server_samples"] = len(uploads)

    head = params.slice(arch.cut_index, arch.M)
    head_mults = nn.complexity(arch, arch.cut_index, arch.M, "forward+backward")
    val_feats = None
    if val is not None and len(val):
        val_feats = nn.forward(arch, ext, val.x)[0] if ext is not None else val.x
    stopper = _Stopper(cfg.patience, cfg.min_delta)
    scale = cfg.lr / cfg.K

    if cfg.schedule == "clients":
        # replay the FedAvg selection stream; test-only, keeps client grouping
        by_client: dict[int, list[UploadBatch]] = {}
        for b in uploads:
            by_client.setdefault(b.origin, []).append(b)
        sel_rng = stream(cfg.seed, "selection")
        batches = (
            [b for u in np.sort(sel_rng.choice(cfg.U, cfg.clients_per_iteration, replace=False)) for b in by_client.get(int(u), [])]
            for _ in range(cfg.I)
        )
    else:
        pool = shuffle_uploads(uploads, cfg.seed) if uploads else []
        batches = _epoch_batches(pool, cfg.minibatch, cfg.I, cfg.reshuffle, stream(cfg.seed, "server"))

    for it, batch in enumerate(batches):
        if not batch:
            run.metrics.append({"iteration": it + 1, "train_loss": None, "val_accuracy": None})
            continue
        z = np.stack([b.payload for b in batch])
        y = np.array([b.label for b in batch], dtype=np.int64)
        try:
            g, l = client_update(arch, head, z, y, "full")
        except DivergenceError as exc:
            raise DivergenceError(str(exc), it) from None
        run.complexity.server(len(batch) * head_mults)
        head.values -= scale * g.values
        if not np.all(np.isfinite(head.values)):
            raise DivergenceError("non-finite parameters", it)
        if cfg.keep_snapshots:
            run.snapshots.append(head.values.copy())
        acc = None
        if val_feats is not None and ((it + 1) % cfg.eval_every == 0 or it == cfg.I - 1):
            acc = nn.accuracy(arch, head, val_feats, val.y)
        run.metrics.append({"iteration": it + 1, "train_loss": l, "val_accuracy": acc})
        if stopper.update(acc):
            break
    run.params = _merge(params, head)
    return run


def _epoch_batches(pool: list[UploadBatch], size: int, steps: int, reshuffle: bool, rng: np.random.Generator):
    n = len(pool)
    if n == 0:
        for _ in range(steps):
            yield []
        return
    order = np.arange(n)
    done = 0
    epoch = 0
    while done < steps:
        if reshuffle and epoch > 0:
            order = rng.permutation(n)
        for i in range(0, n, size):
            if done >= steps:
                return
            yield [pool[j] for j in order[i : i + size]]
            done += 1
        epoch += 1


def run_protocol(name: str, arch, extractor, dataset, partition, cfg, **kw) -> TrainRun:
    if name == "fl":
        return run_fl(arch, dataset, partition, cfg, **kw)
    if name == "ftl_full":
        return run_ftl(arch, extractor, dataset, partition, cfg, "full", **kw)
    if name == "ftl_head":
        return run_ftl(arch, extractor, dataset, partition, cfg, "head", **kw)
    if name == "fbftl":
        return run_fbftl(arch, extractor, dataset, partition, cfg, **kw)
    raise ConfigError(f"unknown protocol {name!r}", "protocol")
