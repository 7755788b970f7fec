"""Run configuration: YAML/JSON tree, schema validation, resolution of defaults.

A config can also be a previously written ``run.json``; its ``config`` key is
the fully resolved config and reproduces the run.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import yaml

from . import nn
from .channel import ChannelModel
from .compression import CompressionConfig
from .data import DatasetSpec
from .errors import ConfigError
from .feature_privacy import DpConfig
from .protocols import PROTOCOLS, RoundConfig

DATASET_DEFAULTS = {"class_separation": 3.0, "noise_std": 1.0, "validation_fraction": 0.2}
SOURCE_DEFAULTS = {"epochs": 5, "lr": 0.05, "batch_size": 32, "label_shift": 1}
ROUND_DEFAULTS = {"strategy": "iid_shuffle"}
DP_EXTRA = {"sigma": None}


@dataclass
class RunConfig:
    protocol: str
    seed: int
    arch: dict
    dataset: dict
    source: dict
    round: dict
    channel: dict | None = None
    compression: dict | None = None
    dp: dict | None = None
    output_dir: str = "out"

    # ------------------------------------------------------------------ builders

    def architecture(self) -> nn.Architecture:
        try:
            return nn.architecture_from_dict(self.arch)
        except ConfigError as exc:
            raise ConfigError(str(exc), "arch") from None

    def dataset_spec(self) -> DatasetSpec:
        d = {k: v for k, v in self.dataset.items() if k != "validation_fraction"}
        return DatasetSpec(seed=self.seed, **d)

    def round_config(self) -> RoundConfig:
        r = {k: v for k, v in self.round.items() if k != "strategy"}
        return RoundConfig(seed=self.seed, **r)

    def channel_model(self) -> ChannelModel | None:
        return None if self.channel is None else ChannelModel(seed=self.seed, **self.channel)

    def compression_config(self) -> CompressionConfig | None:
        return None if self.compression is None else CompressionConfig(**self.compression)

    def dp_config(self) -> DpConfig | None:
        if self.dp is None:
            return None
        return DpConfig(**{k: v for k, v in self.dp.items() if k != "sigma"})

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "seed": self.seed,
            "arch": self.arch,
            "dataset": self.dataset,
            "source": self.source,
            "round": self.round,
            "channel": self.channel,
            "compression": self.compression,
            "dp": self.dp,
            "output_dir": self.output_dir,
        }


def _allowed(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def _section(tree: dict, name: str, allowed: set[str], defaults: dict | None = None, required=()) -> dict:
    raw = tree.get(name)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("must be a mapping", name)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}", f"{name}.{unknown[0]}")
    for key in required:
        if key not in raw:
            raise ConfigError("missing required key", f"{name}.{key}")
    out = dict(defaults or {})
    out.update(raw)
    return out


def _resolve_arch(value: Any, base: Path) -> dict:
    if isinstance(value, str):
        path = Path(value)
        if not path.is_absolute():
            path = (base / path).resolve()
        if not path.exists():
            raise ConfigError(f"file not found: {path}", "arch")
        return yaml.safe_load(path.read_text())
    if isinstance(value, dict):
        if "mlp" in value:
            return _mlp_dict(value["mlp"], int(value.get("cut_index", 1)), bool(value.get("bias", True)))
        return value
    raise ConfigError("must be a file path or a mapping", "arch")


def _mlp_dict(widths, cut_index: int, bias: bool) -> dict:
    layers = []
    for i in range(len(widths) - 1):
        layers.append({"kind": "dense", "output_nodes": int(widths[i + 1]), "bias": bias})
        layers.append({"kind": "activation", "fn": "softmax" if i == len(widths) - 2 else "relu"})
    return {"input": [int(widths[0])], "layers": layers, "cut_index": cut_index, "num_classes": int(widths[-1])}


def parse_config(tree: dict, base: Path | None = None) -> RunConfig:
    """Validate a config tree and fill defaults. Errors name the failing key path."""
    if not isinstance(tree, dict):
        raise ConfigError("config must be a mapping", "config")
    if "config" in tree and isinstance(tree["config"], dict) and "protocol" in tree["config"]:
        tree = tree["config"]
    base = base or Path.cwd()
    top = {"protocol", "seed", "arch", "dataset", "source", "round", "channel", "compression", "dp", "output_dir"}
    unknown = sorted(set(tree) - top)
    if unknown:
        raise ConfigError("unknown key", unknown[0])
    protocol = tree.get("protocol")
    if protocol not in PROTOCOLS:
        raise ConfigError(f"must be one of {', '.join(PROTOCOLS)}", "protocol")
    seed = tree.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("must be a nonnegative integer", "seed")
    if "arch" not in tree:
        raise ConfigError("missing required key", "arch")
    arch = _resolve_arch(tree["arch"], base)

    ds_keys = (_allowed(DatasetSpec) - {"seed"}) | {"validation_fraction"}
    dataset = _section(tree, "dataset", ds_keys, DATASET_DEFAULTS, ("num_classes", "input_dim", "samples_per_class"))
    source = _section(tree, "source", set(SOURCE_DEFAULTS), SOURCE_DEFAULTS)
    rnd = _section(tree, "round", (_allowed(RoundConfig) - {"seed"}) | {"strategy"}, ROUND_DEFAULTS, ("U", "C", "K", "lr", "I"))
    channel = compression = dp = None
    if tree.get("channel") is not None:
        channel = _section(tree, "channel", _allowed(ChannelModel) - {"seed"})
    if tree.get("compression") is not None:
        compression = _section(tree, "compression", _allowed(CompressionConfig))
    if tree.get("dp") is not None:
        dp = _section(tree, "dp", _allowed(DpConfig) | set(DP_EXTRA), DP_EXTRA, ("epsilon", "delta"))

    cfg = RunConfig(protocol, seed, arch, dataset, source, rnd, channel, compression, dp, str(tree.get("output_dir", "out")))
    # build every component once so nested validation errors surface now
    built = cfg.architecture()
    spec = _wrap("dataset", cfg.dataset_spec)
    rc = _wrap("round", cfg.round_config)
    chm = _wrap("channel", cfg.channel_model)
    comp = _wrap("compression", cfg.compression_config)
    dpc = _wrap("dp", cfg.dp_config)
    # echo every default so the written config fully determines the run
    cfg.dataset = _drop(asdict(spec), "seed") | {"validation_fraction": cfg.dataset["validation_fraction"]}
    cfg.round = _drop(asdict(rc), "seed") | {"strategy": cfg.round["strategy"]}
    cfg.channel = None if chm is None else _drop(asdict(chm), "seed")
    cfg.compression = None if comp is None else asdict(comp)
    cfg.dp = None if dpc is None else asdict(dpc) | {"sigma": cfg.dp["sigma"]}
    if spec.num_classes != built.num_classes:
        raise ConfigError(f"{spec.num_classes} classes but the architecture outputs {built.num_classes}", "dataset.num_classes")
    if (spec.input_dim,) != tuple(built.in_shape) and spec.input_dim != math.prod(built.in_shape):
        raise ConfigError(f"input_dim {spec.input_dim} does not match architecture input {built.in_shape}", "dataset.input_dim")
    if not 0 <= cfg.dataset["validation_fraction"] < 1:
        raise ConfigError("must lie in [0, 1)", "dataset.validation_fraction")
    if cfg.round["strategy"] not in ("iid_shuffle", "by_label"):
        raise ConfigError("must be iid_shuffle or by_label", "round.strategy")
    total = spec.num_classes * spec.samples_per_class
    n_train = total - int(round(cfg.dataset["validation_fraction"] * total))
    if rc.U * rc.K > n_train:
        raise ConfigError(f"U*K={rc.U * rc.K} exceeds {n_train} training samples", "round.U")
    return cfg


def _drop(d: dict, key: str) -> dict:
    return {k: v for k, v in d.items() if k != key}


def _wrap(key: str, build):
    try:
        return build()
    except ConfigError as exc:
        if exc.key and exc.key.startswith(key):
            raise
        raise ConfigError(str(exc), key) from None
    except TypeError as exc:
        raise ConfigError(str(exc), key) from None


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"file not found: {path}", "config")
    try:
        tree = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"unparseable: {exc}", "config") from None
    return parse_config(tree, path.parent.resolve())
