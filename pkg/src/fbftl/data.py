"""Synthetic Gaussian-cluster datasets, client partitions and source pretraining."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError, DivergenceError
from .seeds import stream


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int
    input_dim: int
    samples_per_class: int
    class_separation: float = 3.0
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2", "dataset.num_classes")
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1", "dataset.input_dim")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1", "dataset.samples_per_class")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0", "dataset.noise_std")


@dataclass
class Dataset:
    """Column-stacked samples: ``x`` is (n, N0), ``y`` holds 0-based labels."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.num_classes)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(self.x.shape[1])] + ["label"])
            for row, label in zip(self.x, self.y):
                w.writerow([repr(float(v)) for v in row] + [int(label)])

    @classmethod
    def from_csv(cls, path: str | Path, num_classes: int | None = None) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        x = np.array([[float(v) for v in r[:-1]] for r in rows])
        y = np.array([int(r[-1]) for r in rows], dtype=np.int64)
        return cls(x, y, int(num_classes if num_classes is not None else y.max() + 1))


@dataclass(frozen=True)
class ClientPartition:
    assignments: tuple[np.ndarray, ...]

    @property
    def U(self) -> int:
        return len(self.assignments)

    @property
    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]

    @property
    def total(self) -> int:
        return sum(self.sizes)


def class_means(spec: DatasetSpec) -> np.ndarray:
    """Per-class means: seeded Gaussian directions rescaled to ``class_separation``.

    With a 1-D input the means alternate around the origin instead, so two
    classes never share a direction.
    """
    N, D = spec.num_classes, spec.input_dim
    if D == 1:
        return (np.arange(N, dtype=np.float64) - (N - 1) / 2.0)[:, None] * spec.class_separation
    dirs = stream(spec.seed, "class_means").normal(size=(N, D))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return spec.class_separation * dirs


def generate_synthetic(spec: DatasetSpec, label_shift: int = 0, noise_key: int = 0) -> Dataset:
    """Isotropic Gaussian clusters, ``samples_per_class`` per class, class-sorted.

    ``label_shift`` relabels cluster ``a`` as class ``(a + shift) mod N``; the
    source task for pretraining uses this to reuse the input space with a
    different label assignment.
    """
    means = class_means(spec)
    rng = stream(spec.seed, "samples", noise_key)
    n = spec.samples_per_class
    x = np.repeat(means, n, axis=0)
    if spec.noise_std > 0:
        x = x + spec.noise_std * rng.normal(size=x.shape)
    clusters = np.repeat(np.arange(spec.num_classes), n)
    y = (clusters + label_shift) % spec.num_classes
    return Dataset(x, y.astype(np.int64), spec.num_classes)


def source_task(spec: DatasetSpec, shift: int = 1) -> Dataset:
    """Related-but-different task: same clusters, rotated labels, fresh noise."""
    return generate_synthetic(spec, label_shift=shift, noise_key=1)


def partition_clients(dataset: Dataset, U: int, K: int, strategy: str = "iid_shuffle", seed: int = 0) -> ClientPartition:
    if U < 1 or K < 1:
        raise ConfigError("U and K must be positive", "round")
    if U * K > len(dataset):
        raise ConfigError(f"U*K={U * K} exceeds dataset size {len(dataset)}", "round")
    if strategy == "iid_shuffle":
        order = stream(seed, "partition").permutation(len(dataset))
    elif strategy == "by_label":
        order = np.argsort(dataset.y, kind="stable")
    else:
        raise ConfigError(f"unknown strategy {strategy!r}", "round.strategy")
    return ClientPartition(tuple(order[u * K : (u + 1) * K].copy() for u in range(U)))


def split_validation(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded (train, validation) split."""
    order = stream(seed, "validation").permutation(len(dataset))
    n_val = int(round(fraction * len(dataset)))
    return dataset.subset(np.sort(order[n_val:])), dataset.subset(np.sort(order[:n_val]))


def pretrain_source(
    arch: nn.Architecture,
    source: Dataset,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
) -> nn.ParamVector:
    """Centralized mini-batch SGD on the source task; returns layers 1..m_c-1.

    The source head is discarded. With ``epochs=0`` the returned block equals
    the seeded initialization.
    """
    params = nn.init_params(arch, seed)
    rng = stream(seed, "pretrain")
    n = len(source)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            idx = order[i : i + batch_size]
            probs, cache = nn.forward(arch, params, source.x[idx])
            batch_loss = nn.loss(probs, source.y[idx])
            if not np.all(np.isfinite(batch_loss)):
                raise DivergenceError("non-finite loss during source pretraining", epoch)
            grad = nn.backward(arch, params, cache, source.y[idx])
            params = nn.sgd_step(params, grad, lr, 1.0 / len(idx))
    if arch.cut_index == 1:
        return nn.ParamVector(np.zeros(0), (), 1)
    return params.slice(1, arch.cut_index - 1)


def empirical_label_distribution(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty label set")
    return np.bincount(labels, minlength=num_classes) / labels.size


def nearest_mean_accuracy(x_train, y_train, x_test, y_test, num_classes: int) -> float:
    """Probe: classify by the closest training class mean."""
    means = np.stack([x_train[y_train == a].mean(axis=0) for a in range(num_classes)])
    d = ((x_test[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(d.argmin(axis=1) == y_test))
