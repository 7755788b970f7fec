"""Acceptance criteria, each at its stated tolerance.

Run with ``pytest tests/test_acceptance.py``; the terminal summary prints one
PASS/FAIL line per criterion with the measured quantity.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from fbftl import accounting as acc
from fbftl import channel as ch
from fbftl import cli, data, nn
from fbftl import label_privacy as lp
from fbftl import protocols as pr
from fbftl.compression import CompressionConfig, compress_with_feedback
from fbftl.config import parse_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SEEDS = range(5)


def criterion(number, title):
    return pytest.mark.criterion(number, title)


def run_config(name, overrides):
    tree = yaml.safe_load((CONFIGS / name).read_text())
    return cli.execute(parse_config(cli.apply_overrides(tree, overrides), CONFIGS)).final_accuracy


# --------------------------------------------------------------------------- 1


@criterion(1, "reference payload table reproduced from stated counts")
def test_reference_payload_table(measured):
    cols = {c["column"]: c for c in cli.table2_report()}
    expected = [
        ("FL", "payload/batch", "4.9 Gb"), ("SFL", "payload/batch", "3.8 Gb"),
        ("FTL_c", "payload/batch", "1.1 Gb"), ("FbFTL", "payload/batch", "131 Kb"),
        ("FL", "total uplink", "3216 Tb"), ("FTL_f", "total uplink", "949 Tb"),
        ("FTL_c", "total uplink", "599 Tb"), ("FbFTL", "total uplink", "6.6 Gb"),
        ("FL", "total downlink", "402 Tb"), ("FbFTL", "total downlink", "3.8 Gb"),
    ]
    got = [(col, row, acc.render_bits(cols[col][row])) for col, row, _ in expected]
    measured(f"{sum(g == e for g, e in zip(got, expected))}/{len(expected)} cells")
    assert got == expected


# --------------------------------------------------------------------------- 2


@criterion(2, "FbFTL head trajectory equals FTL_c over 50 iterations")
def test_fbftl_equals_ftl_head(measured):
    start = time.perf_counter()
    arch = nn.mlp([16, 32, 32, 4], cut_index=2)
    spec = data.DatasetSpec(4, 16, 30, seed=1)
    ds = data.generate_synthetic(spec)
    part = data.partition_clients(ds, 20, 5, seed=1)
    ext = data.pretrain_source(arch, data.source_task(spec), 3, 0.05, seed=1)
    cfg = pr.RoundConfig(U=20, C=0.25, K=5, lr=0.1, I=50, seed=1, schedule="clients", patience=None, keep_snapshots=True)
    a = pr.run_ftl(arch, ext, ds, part, cfg, "head")
    b = pr.run_fbftl(arch, ext, ds, part, cfg)
    gap = max(float(np.max(np.abs(x - y))) for x, y in zip(a.snapshots, b.snapshots))
    elapsed = time.perf_counter() - start
    measured(f"max-abs {gap:.2e}, {elapsed:.1f} s")
    assert len(a.snapshots) == len(b.snapshots) == 50
    assert gap <= 1e-9
    assert elapsed < 10


# --------------------------------------------------------------------------- 3


def _fd_gradient(arch, params, x, y, step=1e-5):
    out = np.zeros_like(params.values)
    for i in range(len(out)):
        plus, minus = params.copy(), params.copy()
        plus.values[i] += step
        minus.values[i] -= step
        out[i] = (nn.loss(nn.forward(arch, plus, x)[0], y) - nn.loss(nn.forward(arch, minus, x)[0], y)) / (2 * step)
    return out


@criterion(3, "finite-difference gradient check on 100 random small nets")
def test_gradient_finite_differences(measured):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        depth = int(rng.integers(1, 4))
        widths = [int(w) for w in rng.integers(2, 9, size=depth + 1)]
        arch = nn.mlp(widths, int(rng.integers(1, depth + 1)))
        params = nn.init_params(arch, int(rng.integers(1 << 30)))
        x = rng.normal(size=widths[0])
        y = int(rng.integers(arch.num_classes))
        analytic = nn.backward(arch, params, nn.forward(arch, params, x)[1], y).values
        numeric = _fd_gradient(arch, params, x, y)
        # relative error with a small absolute floor for entries that are ~0
        rel = np.abs(analytic - numeric) / (np.maximum(np.abs(analytic), np.abs(numeric)) + 1e-3)
        worst = max(worst, float(np.max(rel)))
        assert np.all(np.abs(analytic - numeric) <= 1e-4 * np.maximum(np.abs(analytic), np.abs(numeric)) + 1e-7)
    elapsed = time.perf_counter() - start
    measured(f"worst floored rel {worst:.1e}, {elapsed:.1f} s")
    assert elapsed < 30


# --------------------------------------------------------------------------- 4


@criterion(4, "packet loss law matches Monte Carlo within 3 sigma")
def test_packet_loss_law(measured):
    trials = 100_000
    worst = 0.0
    for blr in (1e-4, 1e-3, 1e-2):
        for n_b in (1, 10, 1000):
            p = ch.plr(blr, n_b)
            model = ch.ChannelModel(blr, 1)
            rate, _ = ch.simulate_loss_rate(n_b, model, trials, np.random.default_rng(n_b * 7919 + int(1 / blr)))
            z = abs(rate - p) / math.sqrt(p * (1 - p) / trials)
            worst = max(worst, z)
    reference = ch.plr(1e-4, 37_385)
    measured(f"worst |z| {worst:.2f}, plr(1e-4, 37385) = {reference:.4f}")
    assert worst <= 3
    assert round(reference, 3) == 0.976


# --------------------------------------------------------------------------- 5


def _two_sum_error(a, b):
    s = a + b
    bp = s - a
    return (a - (s - bp)) + (b - bp)


@criterion(5, "error feedback conserves g + m exactly under the residual definition")
def test_error_feedback_conservation(measured):
    rng = np.random.default_rng(5)
    literal_equal = total = 0
    for r in (1.0, 0.1, 0.01):
        for q in (32, 8, 2):
            cfg = CompressionConfig(r=r, q=q)
            for _ in range(10_000):
                g, m = rng.normal(size=20), rng.normal(size=20) * 0.3
                g2, m2 = compress_with_feedback(g, m, cfg)
                s = g + m
                # the residual is exactly the float difference of the target and the upload
                assert np.array_equal(m2, s - g2)
                e_add, e_sub = _two_sum_error(g, m), _two_sum_error(s, -g2)
                for row in zip(g2, m2, -g, -m, e_add, e_sub):
                    assert math.fsum(row) == 0.0
                literal_equal += int(np.sum(g2 + m2 == s))
                total += len(g)
    measured(f"exact with rounding terms; literal float equality {literal_equal / total:.1%}")


# --------------------------------------------------------------------------- 6


def _ordered_batch_entropy(N, K, p):
    mass = {}
    for code in range(N**K):
        seq = [(code // N**i) % N for i in range(K)]
        counts = tuple(seq.count(a) for a in range(N))
        mass[counts] = mass.get(counts, 0.0) + math.prod(p[a] for a in seq)
    return -sum(v * math.log2(v) for v in mass.values() if v > 0)


@criterion(6, "label entropy equals the ordered-batch brute force")
def test_label_entropy_oracle(measured):
    rng = np.random.default_rng(6)
    worst = 0.0
    for N in (1, 2, 3):
        for K in (1, 2, 3, 4):
            for _ in range(20):
                p = rng.dirichlet(np.ones(N))
                worst = max(worst, abs(lp.entropy_given_dist(N, K, p) - _ordered_batch_entropy(N, K, p)))
    h22 = lp.entropy_given_dist(2, 2)
    measured(f"max diff {worst:.1e}, H(N=2,K=2) = {h22!r}")
    assert worst < 1e-12
    assert h22 == 1.5


# --------------------------------------------------------------------------- 7


@criterion(7, "empirical census entropy converges with U")
def test_census_entropy_convergence(measured):
    start = time.perf_counter()
    h_true = lp.entropy_given_dist(10, 4)
    medians = []
    for U in (10**3, 10**4, 10**5, 10**6):
        gaps = [abs(lp.empirical_entropy(lp.simulate_census(10, 4, U, None, seed)) - h_true) for seed in range(20)]
        medians.append(float(np.median(gaps)))
    elapsed = time.perf_counter() - start
    measured(", ".join(f"{m:.4f}" for m in medians) + f" bits, {elapsed:.0f} s")
    assert all(a > b for a, b in zip(medians, medians[1:]))
    assert medians[-1] < 0.05
    assert elapsed < 60


# --------------------------------------------------------------------------- 8


@criterion(8, "total label leakage small for small K, high for large K")
def test_leakage_shape(measured):
    start = time.perf_counter()
    rows = lp.leakage_sweep(10, 50_000, [1, 2, 4, 8, 16, 32, 64, 128], seed=0)
    ratio = {r["K"]: r["L_t"] / r["H_uni"] for r in rows}
    elapsed = time.perf_counter() - start
    measured(" ".join(f"K={k}:{v:.3f}" for k, v in ratio.items()))
    assert all(ratio[k] < 0.1 for k in (1, 2, 4))
    assert all(ratio[k] > 0.5 for k in (64, 128))
    assert elapsed < 120


# --------------------------------------------------------------------------- 9


@criterion(9, "under matched DP calibration FbFTL beats FedAvg FL by >= 20 points")
def test_dp_accuracy_gap(measured):
    start = time.perf_counter()
    fl_round = {"protocol": "fl", "round.lr": 0.1, "round.I": 300, "round.sgd_minibatch": None}
    fl = [run_config("dp_desk.yaml", fl_round | {"seed": s}) for s in SEEDS]
    fb = [run_config("dp_desk.yaml", {"seed": s}) for s in SEEDS]
    gap = float(np.median(fb) - np.median(fl))
    elapsed = time.perf_counter() - start
    measured(f"median FbFTL {np.median(fb):.3f}, FL {np.median(fl):.3f}, gap {gap:.3f}, {elapsed:.0f} s")
    assert gap >= 0.20
    assert elapsed < 600


# --------------------------------------------------------------------------- 10


@criterion(10, "FbFTL tolerates feature compression while FL degrades")
def test_compression_robustness(measured):
    start = time.perf_counter()
    fl_round = {"protocol": "fl", "round.lr": 0.1, "round.I": 200, "round.sgd_minibatch": None}
    fl = [run_config("compress_desk.yaml", fl_round | {"seed": s}) for s in SEEDS]
    fl_c = [run_config("compress_desk.yaml", fl_round | {"seed": s, "compression": {"r": 0.001, "q": 2}}) for s in SEEDS]
    fb = [run_config("compress_desk.yaml", {"seed": s}) for s in SEEDS]
    fb_c = [run_config("compress_desk.yaml", {"seed": s, "compression": {"r": 0.01, "q": 32}}) for s in SEEDS]
    fl_drop = float(np.median(fl) - np.median(fl_c))
    fb_drop = float(np.median(fb) - np.median(fb_c))
    elapsed = time.perf_counter() - start
    measured(f"median drop FL {fl_drop:.3f}, FbFTL {fb_drop:.3f}, {elapsed:.0f} s")
    assert abs(fb_drop) <= 0.05
    assert fl_drop >= 0.15
    assert elapsed < 600


# --------------------------------------------------------------------------- 11


@criterion(11, "metered bits equal closed-form payloads for all four methods")
def test_ledger_formula_agreement(measured):
    arch = nn.mlp([16, 32, 32, 4], cut_index=2)
    spec = data.DatasetSpec(4, 16, 45, seed=3)
    ds = data.generate_synthetic(spec)
    part = data.partition_clients(ds, 20, 8, seed=3)
    ext = data.pretrain_source(arch, data.source_task(spec), 2, 0.05, seed=3)
    cfg = pr.RoundConfig(U=20, C=0.4, K=8, lr=0.05, I=50, seed=3, patience=None)
    checked = 0
    for method in pr.PROTOCOLS:
        run = pr.run_protocol(method, arch, ext, ds, part, cfg)
        mc = acc.MethodConfig.for_arch(method, arch, I=50, U=20, C=0.4, K=8)
        assert run.ledger.uplink_bits == acc.uplink_formula(mc)
        assert run.ledger.downlink_bits == acc.downlink_formula(mc)
        assert run.complexity.client_total == acc.complexity_formula(mc)
        checked += 3
    measured(f"{checked} quantities equal")
