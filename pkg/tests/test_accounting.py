import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbftl import accounting as acc
from fbftl import nn
from fbftl.errors import ConfigError

VGG = acc.ParamCounts(total=153_144_650, head=35_665_418, feature_width=4096, num_classes=10)


def vgg(method, batches, **kw):
    return acc.MethodConfig(method, VGG, batches=batches, U=6250, C=8 / 6250, K=8, count_labels=False, **kw)


def test_reference_uplink_totals():
    assert acc.uplink_formula(vgg("fl", 656_250)) == 153_144_650 * 32 * 656_250
    assert acc.render_bits(acc.uplink_formula(vgg("fl", 656_250))) == "3216 Tb"
    assert acc.render_bits(acc.uplink_formula(vgg("ftl_head", 525_000))) == "599 Tb"
    assert acc.render_bits(acc.uplink_formula(vgg("fbftl", 50_000))) == "6.6 Gb"
    assert acc.bits_per_batch(vgg("fbftl", 50_000)) == 131_072


def test_reference_downlinks():
    assert acc.render_bits(acc.downlink_formula(vgg("fl", 656_250))) == "402 Tb"
    assert acc.downlink_formula(vgg("fbftl", 50_000)) == 117_479_232 * 32
    assert acc.render_bits(acc.downlink_formula(vgg("ftl_head", 525_000))) == "322 Tb"


def test_label_bits_are_counted_for_fbftl():
    with_labels = acc.MethodConfig("fbftl", VGG, batches=10)
    assert acc.bits_per_batch(with_labels) == 4096 * 32 + 4
    assert acc.label_bits(10) == 4 and acc.label_bits(2) == 1 and acc.label_bits(1) == 0


def test_zero_iterations_gives_zero_downlink():
    assert acc.downlink_formula(acc.MethodConfig("fl", VGG, I=0)) == 0


def test_missing_counts_is_config_error():
    with pytest.raises(ConfigError):
        acc.MethodConfig("fl", None, I=1)
    with pytest.raises(ConfigError):
        acc.MethodConfig("sgd", VGG, I=1)


def test_clients_per_iteration_rounds_up():
    assert acc.clients_per_iteration(6250, 1.28e-3) == 8
    assert acc.clients_per_iteration(10, 0.25) == 3
    assert acc.clients_per_iteration(10, 0.01) == 1


def desk():
    return nn.mlp([6, 10, 8, 3], cut_index=2)


def test_complexity_formula_small_cases():
    arch = desk()
    fb = acc.MethodConfig.for_arch("fbftl", arch, U=1, K=1)
    assert acc.complexity_formula(fb) == nn.complexity(arch, 1, arch.cut_index - 1)
    fl = acc.MethodConfig.for_arch("fl", arch, I=3, U=4, C=0.5, K=1)
    assert acc.complexity_formula(fl) == 2 * 3 * 2 * nn.complexity(arch, 1, arch.M)


def test_per_sample_ratio_exceeds_next_layer_width():
    ratio, width = acc.per_sample_upload_ratio(nn.mlp([5, 8, 4], cut_index=2))
    assert ratio > width
    assert ratio == (4 * 9) / 8


def test_payload_ratio_bound_dense_head():
    arch = nn.mlp([3, 8, 4], cut_index=2)
    ratio, bound = acc.payload_ratio_bound(arch, I=10, U=5, C=0.4, K=2)
    # FTL_c: 32*10*2*36, FbFTL: 32*10*8 (labels excluded)
    assert ratio == pytest.approx((10 * 2 * 36) / (10 * 8))
    assert bound == pytest.approx(10 * 2 / 10 * 4)
    assert ratio > 4


def test_reference_payload_ratio():
    r = acc.uplink_formula(vgg("ftl_head", 525_000)) / acc.uplink_formula(vgg("fbftl", 50_000))
    assert r == pytest.approx(9.1e4, rel=0.01)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(2, 12), min_size=3, max_size=5), st.integers(1, 20), st.integers(1, 30),
       st.floats(0.05, 1.0), st.integers(1, 8), st.data())
def test_payload_ordering_chain(widths, I, U, C, K, data):
    arch = nn.mlp(widths, cut_index=data.draw(st.integers(2, len(widths) - 1)))
    I_fl = I + data.draw(st.integers(0, 10))
    p = {m: acc.uplink_formula(acc.MethodConfig.for_arch(m, arch, I=I_fl if m == "fl" else I, U=U, C=C, K=K, count_labels=False))
         for m in acc.METHODS}
    assert p["ftl_head"] < p["ftl_full"] <= p["fl"]
    # per-sample FbFTL uploads are smaller than every gradient upload
    assert acc.params_per_batch(acc.MethodConfig.for_arch("fbftl", arch, I=1)) < acc.params_per_batch(acc.MethodConfig.for_arch("ftl_head", arch, I=1))
    assert acc.downlink_formula(acc.MethodConfig.for_arch("ftl_head", arch, I=I)) > acc.downlink_formula(acc.MethodConfig.for_arch("fbftl", arch, I=I))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["up", "down", "client", "server"]), st.integers(0, 10**9)), max_size=40))
def test_ledgers_are_monotone(events):
    pl, cl = acc.PayloadLedger(), acc.ComplexityLedger()
    prev = (0, 0, 0, 0, 0)
    for kind, v in events:
        if kind == "up":
            pl.upload(v, delivered=v % 2 == 0)
        elif kind == "down":
            pl.broadcast(v)
        elif kind == "client":
            cl.client(v % 3, v)
        else:
            cl.server(v)
        now = (pl.uplink_bits, pl.downlink_bits, pl.uplink_batches, cl.client_total, cl.server_multiplications)
        assert all(a <= b for a, b in zip(prev, now))
        prev = now


def test_ledgers_reject_negative_events():
    with pytest.raises(ValueError):
        acc.PayloadLedger().upload(-1)
    with pytest.raises(ValueError):
        acc.ComplexityLedger().server(-5)


@pytest.mark.parametrize("bits,text", [(4.9e9, "4.9 Gb"), (131_072, "131 Kb"), (6.5536e9, "6.6 Gb"), (3.2e15, "3200 Tb"), (950, "950 b")])
def test_render_bits(bits, text):
    assert acc.render_bits(bits) == text
