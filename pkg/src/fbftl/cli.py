"""Command-line experiment runner.

Subcommands: payload, simulate, channel, compress, privacy-label, privacy-dp,
sweep. Exit status 0 on success, 2 on validation errors, 3 on runtime errors.
``FBFTL_OUTPUT_DIR`` overrides the output directory of every subcommand.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import accounting as acc
from . import channel as ch
from . import data, label_privacy, nn
from .compression import CompressionConfig
from .config import RunConfig, load_config, parse_config
from .errors import ConfigError, FbftlError
from .feature_privacy import DpConfig, dp_run
from .protocols import PROTOCOLS, TrainRun, run_protocol

OUTPUT_ENV = "FBFTL_OUTPUT_DIR"

# VGG-16 transferred to a 10-class task, cut at the second fully connected layer
VGG16_COUNTS = acc.ParamCounts(total=153_144_650, head=35_665_418, feature_width=4096, num_classes=10)
VGG16_U, VGG16_K, VGG16_CLIENTS_PER_ITER = 6250, 8, 8
TABLE2_COLUMNS = (
    # (column label, method, upload batches)
    ("FL", "fl", 656_250),
    ("SFL", "sfl", 656_250),
    ("FL_low", "fl", 68_750),
    ("FTL_f", "ftl_full", 193_750),
    ("FTL_f_low", "ftl_full", 25_000),
    ("FTL_c", "ftl_head", 525_000),
    ("FbFTL", "fbftl", 50_000),
)
SFL_PARAMS_PER_BATCH = 117_483_328
ROW_NAMES = ("upload batches", "params/batch", "payload/batch", "total uplink", "total downlink", "complexity")


def output_dir(default: str | Path) -> Path:
    out = Path(os.environ.get(OUTPUT_ENV) or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_csv(path: Path, rows: list[dict], seed: int | None = None) -> None:
    """Header row plus one row per dict; a seed column is always present."""
    if not rows:
        raise ConfigError("nothing to write", "grid")
    rows = [({"seed": seed} | r) if "seed" not in r else r for r in rows]
    keys = list(rows[0])
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(r.get(k)) for k in keys})


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, float):
        return repr(v)
    return v


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


# --------------------------------------------------------------------------- payload report


def table2_report(d: int = 32, count_labels: bool = False) -> list[dict]:
    """Payload cells for the VGG-16 reference setting, one dict per column.

    Batch counts are the ground truth here; iteration counts follow as
    batches / clients-per-iteration. SFL is only sized generically
    (params x d); its downlink and complexity are not modeled.
    """
    C = VGG16_CLIENTS_PER_ITER / VGG16_U
    cols = []
    for label, method, batches in TABLE2_COLUMNS:
        if method == "sfl":
            bits = d * SFL_PARAMS_PER_BATCH
            cols.append({"column": label, "method": method, "upload batches": batches, "params/batch": SFL_PARAMS_PER_BATCH,
                         "payload/batch": bits, "total uplink": bits * batches, "total downlink": None, "complexity": None})
            continue
        mc = acc.MethodConfig(method, VGG16_COUNTS, d=d, batches=batches, U=VGG16_U, C=C, K=VGG16_K, count_labels=count_labels)
        cols.append({
            "column": label, "method": method, "upload batches": batches,
            "params/batch": acc.params_per_batch(mc), "payload/batch": acc.bits_per_batch(mc),
            "total uplink": acc.uplink_formula(mc), "total downlink": acc.downlink_formula(mc), "complexity": None,
        })
    return cols


def arch_report(arch: nn.Architecture, U: int, C: float, K: int, I: int, d: int = 32) -> list[dict]:
    counts = acc.ParamCounts.from_arch(arch)
    cols = []
    for method in acc.METHODS:
        mc = acc.MethodConfig(method, counts, d=d, I=I, U=U, C=C, K=K)
        cols.append({
            "column": method, "method": method, "upload batches": mc.upload_batches,
            "params/batch": acc.params_per_batch(mc), "payload/batch": acc.bits_per_batch(mc),
            "total uplink": acc.uplink_formula(mc), "total downlink": acc.downlink_formula(mc),
            "complexity": acc.complexity_formula(mc),
        })
    return cols


def render_report(cols: list[dict]) -> str:
    def fmt(row, v):
        if v is None:
            return "-"
        if row in ("payload/batch", "total uplink", "total downlink"):
            return acc.render_bits(v)
        if row == "complexity":
            return f"{v:.3g}"
        return f"{v:g}" if isinstance(v, float) else str(v)

    table = [[""] + [c["column"] for c in cols]]
    for row in ROW_NAMES:
        table.append([row] + [fmt(row, c[row]) for c in cols])
    widths = [max(len(r[i]) for r in table) for i in range(len(table[0]))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in table)


def report_table2(d: int = 32) -> tuple[str, list[dict]]:
    cols = table2_report(d)
    return render_report(cols), cols


# --------------------------------------------------------------------------- protocol runs


@dataclass
class Prepared:
    arch: nn.Architecture
    train: data.Dataset
    val: data.Dataset | None
    partition: data.ClientPartition
    extractor: nn.ParamVector


def prepare(cfg: RunConfig) -> Prepared:
    arch = cfg.architecture()
    spec = cfg.dataset_spec()
    full = data.generate_synthetic(spec)
    frac = cfg.dataset["validation_fraction"]
    train, val = data.split_validation(full, frac, cfg.seed) if frac > 0 else (full, None)
    src = data.source_task(spec, shift=int(cfg.source["label_shift"]))
    in_shape = tuple(arch.in_shape)
    if len(in_shape) > 1:
        train = data.Dataset(train.x.reshape((-1,) + in_shape), train.y, train.num_classes)
        val = None if val is None else data.Dataset(val.x.reshape((-1,) + in_shape), val.y, val.num_classes)
        src = data.Dataset(src.x.reshape((-1,) + in_shape), src.y, src.num_classes)
    rc = cfg.round_config()
    partition = data.partition_clients(train, rc.U, rc.K, cfg.round["strategy"], cfg.seed)
    extractor = nn.ParamVector(np.zeros(0), (), 1)
    if cfg.protocol != "fl":
        s = cfg.source
        extractor = data.pretrain_source(arch, src, int(s["epochs"]), float(s["lr"]), cfg.seed, int(s["batch_size"]))
    return Prepared(arch, train, val, partition, extractor)


def execute(cfg: RunConfig) -> TrainRun:
    p = prepare(cfg)
    rc = cfg.round_config()
    kw = {"val": p.val, "channel": cfg.channel_model(), "compression": cfg.compression_config()}
    dp = cfg.dp_config()
    if dp is not None:
        run = dp_run(cfg.protocol, dp, p.arch, p.extractor, p.train, p.partition, rc, val=p.val, sigma=cfg.dp.get("sigma"))
    else:
        run = run_protocol(cfg.protocol, p.arch, p.extractor, p.train, p.partition, rc, **kw)
    run.config = cfg.to_dict()
    if cfg.channel is None and cfg.compression is None and dp is None:
        mc = acc.MethodConfig.for_arch(cfg.protocol, p.arch, d=rc.d, I=run.iterations if cfg.protocol != "fbftl" else rc.I,
                                       U=rc.U, C=rc.C, K=rc.K)
        run.extra["formula"] = {"uplink_bits": acc.uplink_formula(mc), "downlink_bits": acc.downlink_formula(mc),
                                "complexity": acc.complexity_formula(mc)}
    return run


def apply_overrides(tree: dict, overrides: dict) -> dict:
    """Set dotted keys such as ``round.lr`` in a copy of a config tree."""
    out = json.loads(json.dumps(tree))
    for key, value in overrides.items():
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            if node.get(part) is None:
                node[part] = {}
            node = node[part]
        node[parts[-1]] = value
    return out


def _load_tree(path: str) -> tuple[dict, Path]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"file not found: {p}", "config")
    tree = yaml.safe_load(p.read_text())
    if isinstance(tree, dict) and isinstance(tree.get("config"), dict) and "protocol" in tree["config"]:
        tree = tree["config"]
    return tree, p.parent.resolve()


# --------------------------------------------------------------------------- grid cells


def cell_channel(method: str, blr: float, block_bits: int, bits: int, n_r: int = 0, trials: int = 0, seed: int = 0) -> dict:
    n_b = ch.packet_blocks(bits, block_bits)
    row = {"method": method, "blr": blr, "batch_bits": bits, "n_b": n_b, "n_r": n_r,
           "plr": ch.plr_retx(blr, n_b, n_r), "expected_attempts": ch.expected_attempts(blr, n_b, n_r)}
    if trials:
        from .seeds import stream

        model = ch.ChannelModel(blr, block_bits, n_r, seed)
        loss, attempts = ch.simulate_loss_rate(bits, model, trials, stream(seed, "channel", n_b))
        row.update({"mc_loss_rate": loss, "mc_attempts": attempts, "trials": trials})
    return row


def cell_run(tree: dict, base: Path, overrides: dict) -> dict:
    cfg = parse_config(apply_overrides(tree, overrides), base)
    run = execute(cfg)
    row = dict(overrides)
    row.update({"protocol": cfg.protocol, "seed": cfg.seed, "final_accuracy": run.final_accuracy,
                "iterations": run.iterations, "uplink_bits": run.ledger.uplink_bits, "downlink_bits": run.ledger.downlink_bits})
    if "dp" in run.extra:
        row.update({"sigma": run.extra["dp"]["sigma"], "R": run.extra["dp"]["R"], "diverged": run.extra["dp"]["diverged"]})
    return row


def cell_label(N: int, K: int, total: int, seed: int) -> dict:
    return label_privacy.leakage_sweep(N, total, [K], seed)[0] | {"N": N, "total": total, "seed": seed}


def grid_product(grid: dict) -> list[dict]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("grid must have at least one value on every axis", "grid")
    keys = list(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


# --------------------------------------------------------------------------- subcommands


def cmd_payload(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        rc = cfg.round_config()
        cols = arch_report(cfg.architecture(), rc.U, rc.C, rc.K, rc.I, args.d)
        out = output_dir(args.output or cfg.output_dir)
    else:
        cols = table2_report(args.d)
        out = output_dir(args.output or "out")
    print(render_report(cols))
    rows = [{"row": r} | {c["column"]: c[r] for c in cols} for r in ROW_NAMES]
    write_csv(out / "payload.csv", rows, 0)
    return 0


def cmd_simulate(args) -> int:
    tree, base = _load_tree(args.config)
    if args.protocol:
        tree = apply_overrides(tree, {"protocol": args.protocol})
    if args.seed is not None:
        tree = apply_overrides(tree, {"seed": args.seed})
    cfg = parse_config(tree, base)
    run = execute(cfg)
    out = output_dir(args.output or cfg.output_dir)
    (out / "run.json").write_text(_dump(run.to_dict()))
    write_csv(out / "metrics.csv", run.metrics or [{"iteration": 0, "train_loss": None, "val_accuracy": None}], cfg.seed)
    acc_str = "n/a" if run.final_accuracy is None else f"{run.final_accuracy:.4f}"
    print(f"{cfg.protocol}: {run.iterations} iterations, accuracy {acc_str}, uplink {run.ledger.uplink_bits} bits "
          f"({acc.render_bits(run.ledger.uplink_bits)}), downlink {run.ledger.downlink_bits} bits")
    return 0


def _reference_batch_bits(d: int) -> dict[str, int]:
    out = {}
    for label, method, batches in TABLE2_COLUMNS:
        if method in ("sfl",) or label.endswith("_low") or label == "FTL_f":
            continue
        out[label] = acc.bits_per_batch(acc.MethodConfig(method, VGG16_COUNTS, d=d, batches=batches, count_labels=False))
    return out


def cmd_channel(args) -> int:
    sizes = _reference_batch_bits(args.d)
    if args.config:
        cfg = load_config(args.config)
        arch = cfg.architecture()
        sizes = {m: acc.bits_per_batch(acc.MethodConfig.for_arch(m, arch, d=args.d, I=1)) for m in ("fl", "ftl_head", "fbftl")}
    rows = [cell_channel(m, blr, args.block_bits, bits, args.n_r, args.trials, args.seed) for m, bits in sizes.items() for blr in args.blr]
    out = output_dir(args.output or "out")
    write_csv(out / "channel.csv", rows, args.seed)
    for r in rows:
        print(f"{r['method']:<8} blr={r['blr']:<8g} n_b={r['n_b']:<7} plr={r['plr']:.6g}")
    return 0


def cmd_compress(args) -> int:
    tree, base = _load_tree(args.config)
    rows = []
    for protocol in args.protocols:
        for r, q in [(None, None)] + [(r, q) for r in args.r for q in args.q]:
            comp = None if r is None else {"r": r, "q": q}
            row = cell_run(tree, base, {"protocol": protocol, "compression": comp, "seed": args.seed if args.seed is not None else tree.get("seed", 0)})
            row["r"], row["q"] = (1.0, 32) if r is None else (r, q)
            row["compressed"] = r is not None
            rows.append(row)
    rows.sort(key=lambda x: (x["protocol"], x["compressed"], -x["r"], -x["q"]))
    out = output_dir(args.output or "out")
    write_csv(out / "compress.csv", rows)
    for row in rows:
        a = row["final_accuracy"]
        print(f"{row['protocol']:<8} r={row['r']:<6g} q={row['q']:<3} compressed={row['compressed']!s:<5} "
              f"acc={'n/a' if a is None else f'{a:.4f}'} uplink={acc.render_bits(row['uplink_bits'])}")
    return 0


def cmd_privacy_label(args) -> int:
    rows = [cell_label(args.N, K, args.total, args.seed) for K in args.K]
    out = output_dir(args.output or "out")
    write_csv(out / "privacy_label.csv", rows)
    for r in rows:
        flag = " (negative L_s)" if r["negative_L_s"] else ""
        print(f"K={r['K']:<5} U={r['U']:<6} H_uni={r['H_uni']:.4f} H_emp={r['H_emp']:.4f} L_t={r['L_t']:.4f}{flag}")
    return 0


def cmd_privacy_dp(args) -> int:
    tree, base = _load_tree(args.config)
    rows = []
    for protocol, K, eps, seed in itertools.product(args.protocols, args.K, args.epsilon, args.seeds):
        ov = {"protocol": protocol, "round.K": K, "seed": seed, "dp": {"epsilon": eps, "delta": args.delta, "c1": args.c1, "c2": args.c2}}
        row = cell_run(tree, base, ov)
        row.update({"K": K, "epsilon": eps, "delta": args.delta})
        row.pop("round.K", None)
        rows.append(row)
    rows.sort(key=lambda x: (x["protocol"], x["K"], x["epsilon"], x["seed"]))
    out = output_dir(args.output or "out")
    write_csv(out / "privacy_dp.csv", rows)
    print("note: c1, c2 are unspecified constants (defaults 1); epsilon values are bound-based")
    for r in rows:
        a = r["final_accuracy"]
        print(f"{r['protocol']:<8} K={r['K']:<3} eps={r['epsilon']:<6g} seed={r['seed']:<3} sigma={r['sigma']:.3g} "
              f"acc={'n/a' if a is None else f'{a:.4f}'}{' diverged' if r['diverged'] else ''}")
    return 0


def cmd_sweep(args) -> int:
    spec = yaml.safe_load(Path(args.grid).read_text()) if Path(args.grid).exists() else None
    if not isinstance(spec, dict):
        raise ConfigError(f"grid file {args.grid} missing or not a mapping", "grid")
    sub = args.subcommand
    grid = spec.get("grid") or {}
    seeds = spec.get("seeds", [spec.get("seed", 0)])
    cells = grid_product(grid)
    rows = []
    if sub == "channel":
        d = int(spec.get("d", 32))
        sizes = _reference_batch_bits(d)
        for c in cells:
            method = c.get("method", "FbFTL")
            bits = int(c.get("batch_bits", sizes.get(method, 0)))
            if bits <= 0:
                raise ConfigError(f"unknown method {method!r} and no batch_bits", "grid.method")
            for s in seeds:
                rows.append(cell_channel(method, float(c["blr"]), int(c.get("block_bits", spec.get("block_bits", 131_072))), bits,
                                         int(c.get("n_r", 0)), int(spec.get("trials", 0)), int(s)) | {"seed": int(s)})
    elif sub == "privacy-label":
        for c in cells:
            for s in seeds:
                rows.append(cell_label(int(c.get("N", spec.get("N", 10))), int(c["K"]), int(c.get("total", spec.get("total", 50_000))), int(s)))
    elif sub in ("simulate", "compress", "privacy-dp"):
        if "config" not in spec:
            raise ConfigError("run sweeps need a base config", "config")
        cfg_path = Path(spec["config"])
        if not cfg_path.is_absolute():
            cfg_path = Path(args.grid).resolve().parent / cfg_path
        tree, base = _load_tree(str(cfg_path))
        for c in cells:
            for s in seeds:
                ov = _run_overrides(sub, c) | {"seed": int(s)}
                row = cell_run(tree, base, ov)
                rows.append({k: v for k, v in c.items()} | {k: v for k, v in row.items() if "." not in k and k not in ("compression", "dp")})
    else:
        raise ConfigError(f"unknown sweep target {sub!r}", "subcommand")
    rows.sort(key=lambda r: json.dumps(r, sort_keys=True, default=str))
    out = output_dir(args.output or spec.get("output_dir", "out"))
    write_csv(out / f"sweep_{sub.replace('-', '_')}.csv", rows)
    print(f"{len(rows)} rows -> {out / ('sweep_' + sub.replace('-', '_') + '.csv')}")
    return 0


def _run_overrides(sub: str, cell: dict) -> dict:
    ov = {}
    for k, v in cell.items():
        if sub == "compress" and k in ("r", "q"):
            ov.setdefault("compression", {})[k] = v
        elif sub == "privacy-dp" and k in ("epsilon", "delta", "c1", "c2"):
            ov.setdefault("dp", {"delta": 1e-6})[k] = v
        elif sub == "privacy-dp" and k == "K":
            ov["round.K"] = v
        else:
            ov[k] = v
    return ov


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fbftl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("payload", help="closed-form payload report (VGG-16 reference counts by default)")
    s.add_argument("--config", help="use an architecture-backed run config instead of the reference counts")
    s.add_argument("--d", type=int, default=32, help="bits per transmitted number")
    s.add_argument("--output")
    s.set_defaults(func=cmd_payload)

    s = sub.add_parser("simulate", help="run one protocol from a config")
    s.add_argument("config")
    s.add_argument("--protocol", choices=PROTOCOLS)
    s.add_argument("--seed", type=int)
    s.add_argument("--output")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("channel", help="packet-loss table over a BLR sweep")
    s.add_argument("--blr", type=float, nargs="+", default=[1e-5, 1e-4, 1e-3, 1e-2, 1e-1])
    s.add_argument("--block-bits", type=int, default=131_072)
    s.add_argument("--n-r", type=int, default=0)
    s.add_argument("--trials", type=int, default=0, help="Monte Carlo packets per cell (0 = analytic only)")
    s.add_argument("--config", help="size batches from this config's architecture")
    s.add_argument("--d", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output")
    s.set_defaults(func=cmd_channel)

    s = sub.add_parser("compress", help="(r, q) grid of protocol runs")
    s.add_argument("config")
    s.add_argument("--r", type=float, nargs="+", default=[1.0, 0.1, 0.01, 0.001])
    s.add_argument("--q", type=int, nargs="+", default=[32, 8, 2])
    s.add_argument("--protocols", nargs="+", choices=PROTOCOLS, default=list(PROTOCOLS))
    s.add_argument("--seed", type=int)
    s.add_argument("--output")
    s.set_defaults(func=cmd_compress)

    s = sub.add_parser("privacy-label", help="label-leakage K sweep at fixed U*K")
    s.add_argument("--N", type=int, default=10)
    s.add_argument("--total", type=int, default=50_000, help="U*K")
    s.add_argument("--K", type=int, nargs="+", default=[1, 2, 4, 8, 16, 32, 64, 128])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output")
    s.set_defaults(func=cmd_privacy_label)

    s = sub.add_parser("privacy-dp", help="(method, K, epsilon) grid of DP runs")
    s.add_argument("config")
    s.add_argument("--protocols", nargs="+", choices=PROTOCOLS, default=["fl", "fbftl"])
    s.add_argument("--K", type=int, nargs="+", default=[4])
    s.add_argument("--epsilon", type=float, nargs="+", default=[0.5, 1.0, 2.0, 4.0])
    s.add_argument("--delta", type=float, default=1e-6)
    s.add_argument("--c1", type=float, default=1.0)
    s.add_argument("--c2", type=float, default=1.0)
    s.add_argument("--seeds", type=int, nargs="+", default=[0])
    s.add_argument("--output")
    s.set_defaults(func=cmd_privacy_dp)

    s = sub.add_parser("sweep", help="Cartesian grid from a YAML grid file")
    s.add_argument("subcommand", choices=["simulate", "channel", "compress", "privacy-label", "privacy-dp"])
    s.add_argument("grid", help="YAML with 'grid' axes, optional 'seeds' and, for runs, a base 'config'")
    s.add_argument("--output")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except (FbftlError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
