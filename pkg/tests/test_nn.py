import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbftl import nn
from fbftl.errors import ConfigError


def random_mlp(rng, max_layers=3, max_width=16):
    n_layers = int(rng.integers(1, max_layers + 1))
    widths = [int(w) for w in rng.integers(2, max_width + 1, size=n_layers + 1)]
    cut = int(rng.integers(1, n_layers + 1))
    return nn.mlp(widths, cut)


def finite_difference(arch, params, x, y, step=1e-5):
    out = np.zeros_like(params.values)
    for i in range(len(out)):
        plus, minus = params.copy(), params.copy()
        plus.values[i] += step
        minus.values[i] -= step
        lp = nn.loss(nn.forward(arch, plus, x)[0], y)
        lm = nn.loss(nn.forward(arch, minus, x)[0], y)
        out[i] = (lp - lm) / (2 * step)
    return out


def assert_grad_close(analytic, numeric, rel=1e-4, floor=1e-7):
    err = np.abs(analytic - numeric)
    bound = rel * np.maximum(np.abs(analytic), np.abs(numeric)) + floor
    assert np.all(err <= bound), float(np.max(err - bound))


# --------------------------------------------------------------------------- forward / loss


def test_identity_dense_layer():
    arch = nn.Architecture((nn.Dense(2, 2), nn.Activation("identity", (2,))), 1, 2)
    params = nn.ParamVector(np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]), (0,), 1)
    out, _ = nn.forward(arch, params, np.array([1.0, 0.0]))
    assert np.array_equal(out, [1.0, 0.0])


def test_forward_matches_hand_rolled_matmuls():
    arch = nn.mlp([5, 7, 3], cut_index=2)
    params = nn.init_params(arch, seed=11)
    x = np.random.default_rng(3).normal(size=5)
    w1 = params.block(1)[: 7 * 5].reshape(7, 5)
    b1 = params.block(1)[7 * 5 :]
    w2 = params.block(2)[: 3 * 7].reshape(3, 7)
    b2 = params.block(2)[3 * 7 :]
    h = np.maximum(w1 @ x + b1, 0)
    logits = w2 @ h + b2
    expected = np.exp(logits - logits.max()) / np.exp(logits - logits.max()).sum()
    out, cache = nn.forward(arch, params, x)
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)
    np.testing.assert_allclose(cache.features, h, rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=12))
def test_softmax_is_a_distribution(logits):
    p = nn.softmax(np.array(logits))
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-9


def test_forward_is_deterministic():
    arch = nn.mlp([4, 6, 3], cut_index=2)
    params = nn.init_params(arch, 0)
    x = np.arange(4.0)
    a, _ = nn.forward(arch, params, x)
    b, _ = nn.forward(arch, params, x)
    assert a.tobytes() == b.tobytes()


def test_batched_forward_matches_single_samples():
    arch = nn.mlp([4, 6, 3], cut_index=2)
    params = nn.init_params(arch, 1)
    xs = np.random.default_rng(0).normal(size=(5, 4))
    batch, _ = nn.forward(arch, params, xs)
    for i in range(5):
        np.testing.assert_allclose(batch[i], nn.forward(arch, params, xs[i])[0], atol=1e-15)


def test_dimension_mismatch_is_config_error():
    arch = nn.mlp([4, 3], cut_index=1)
    with pytest.raises(ConfigError):
        nn.forward(arch, nn.init_params(arch, 0), np.zeros(5))


def test_loss_values():
    assert nn.loss(np.array([0.0, 1.0]), 1) == 0.0
    assert nn.loss(np.array([math.exp(-1), 1 - math.exp(-1)]), 0) == pytest.approx(1.0, abs=1e-15)
    assert nn.loss(np.full(10, 0.1), 7) == pytest.approx(2.302585, abs=1e-6)
    assert math.isfinite(nn.loss(np.array([0.0, 1.0]), 0))


# --------------------------------------------------------------------------- backward


def test_zero_loss_gives_zero_output_gradient():
    arch = nn.Architecture((nn.Dense(2, 2), nn.Activation("softmax", (2,))), 1, 2)
    params = nn.ParamVector(np.array([1000.0, 0.0, -1000.0, 0.0, 0.0, 0.0]), (0,), 1)
    x = np.array([1.0, 0.0])
    probs, cache = nn.forward(arch, params, x)
    assert probs[0] == 1.0
    grad = nn.backward(arch, params, cache, 0)
    assert np.all(grad.values == 0.0)


def test_backward_matches_finite_differences_mlp():
    rng = np.random.default_rng(5)
    for _ in range(10):
        arch = random_mlp(rng)
        params = nn.init_params(arch, int(rng.integers(1 << 30)))
        x = rng.normal(size=arch.in_shape)
        y = int(rng.integers(arch.num_classes))
        _, cache = nn.forward(arch, params, x)
        assert_grad_close(nn.backward(arch, params, cache, y).values, finite_difference(arch, params, x, y))


def test_backward_matches_finite_differences_conv():
    arch = nn.architecture_from_dict({
        "input": [4, 4, 2],
        "layers": [
            {"kind": "conv2d", "kernel": 3, "channels": 3},
            {"kind": "activation", "fn": "relu"},
            {"kind": "pool", "size": 2},
            {"kind": "flatten"},
            {"kind": "dense", "output_nodes": 5},
            {"kind": "activation", "fn": "relu"},
            {"kind": "dense", "output_nodes": 3},
            {"kind": "activation", "fn": "softmax"},
        ],
        "cut_index": 2,
        "num_classes": 3,
    })
    params = nn.init_params(arch, 4)
    x = np.random.default_rng(9).normal(size=(4, 4, 2))
    _, cache = nn.forward(arch, params, x)
    assert_grad_close(nn.backward(arch, params, cache, 2).values, finite_difference(arch, params, x, 2))


def test_head_scope_gradient_length_and_values():
    arch = nn.mlp([6, 8, 8, 3], cut_index=2)
    params = nn.init_params(arch, 2)
    x = np.ones(6)
    _, cache = nn.forward(arch, params, x)
    full = nn.backward(arch, params, cache, 1)
    head = nn.backward(arch, params, cache, 1, scope="head")
    assert len(head.values) == nn.count_params(arch, arch.cut_index)
    np.testing.assert_array_equal(head.values, full.slice(2, 3).values)


def test_stale_cache_is_rejected():
    arch = nn.mlp([4, 5, 3], cut_index=2)
    other = nn.mlp([4, 6, 3], cut_index=2)
    _, cache = nn.forward(other, nn.init_params(other, 0), np.ones(4))
    with pytest.raises(RuntimeError):
        nn.backward(arch, nn.init_params(arch, 0), cache, 0)


# --------------------------------------------------------------------------- sgd / counting


def test_sgd_step_arithmetic():
    p = nn.ParamVector(np.array([1.0, 1.0]), (0,), 1)
    g = nn.ParamVector(np.array([2.0, -2.0]), (0,), 1)
    assert np.array_equal(nn.sgd_step(p, g, 0.5).values, [0.0, 2.0])
    assert np.array_equal(nn.sgd_step(p, g, 0.0).values, p.values)
    zero = nn.ParamVector(np.zeros(2), (0,), 1)
    assert np.array_equal(nn.sgd_step(p, zero, 0.3).values, p.values)


def test_count_params_reference_layers():
    big = nn.Architecture((nn.Dense(4096, 4096), nn.Dense(4096, 10), nn.Activation("softmax", (10,))), 2, 10)
    assert nn.count_params(big, 1, 1) == 16_781_312
    assert nn.count_params(big, 2, 2) == 40_970
    conv = nn.Conv2D((8, 8, 64), (3, 3), 128)
    assert conv.n_params == 73_856
    assert nn.count_params(big, 3, 2) == 0


def test_complexity_reference_layers():
    big = nn.Architecture((nn.Dense(4096, 4096), nn.Dense(4096, 10), nn.Activation("softmax", (10,))), 2, 10)
    assert nn.complexity(big, 1, 1) == 16_781_312
    assert nn.complexity(big, 1, 1, "forward+backward") == 33_562_624
    assert nn.Conv2D((8, 8, 64), (3, 3), 128).multiplications == 4_726_784


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 20), min_size=2, max_size=5), st.data())
def test_param_count_additivity(widths, data):
    arch = nn.mlp(widths, 1)
    for cut in range(1, arch.M + 1):
        assert nn.count_params(arch, 1, arch.M) == nn.count_params(arch, 1, cut - 1) + nn.count_params(arch, cut, arch.M)


def test_param_vector_slices_are_lossless():
    arch = nn.mlp([3, 4, 5, 2], cut_index=2)
    p = nn.init_params(arch, 0)
    rebuilt = nn.concat(*(p.slice(m, m) for m in p.layers))
    assert np.array_equal(rebuilt.values, p.values)
    assert rebuilt.layer_offsets == p.layer_offsets


# --------------------------------------------------------------------------- config validation


def test_validation_errors_name_layer_index():
    cfg = {"input": [4], "layers": [{"kind": "dense", "output_nodes": 3}, {"kind": "dense", "input_nodes": 5, "output_nodes": 2}],
           "cut_index": 1, "num_classes": 2}
    with pytest.raises(ConfigError, match=r"layers\[1\]"):
        nn.architecture_from_dict(cfg)


def test_cut_layer_must_be_dense():
    cfg = {"input": [4, 4, 1], "layers": [{"kind": "conv2d", "kernel": 3, "channels": 2}, {"kind": "flatten"},
                                          {"kind": "dense", "output_nodes": 2}, {"kind": "activation", "fn": "softmax"}],
           "cut_index": 1, "num_classes": 2}
    with pytest.raises(ConfigError):
        nn.architecture_from_dict(cfg)


def test_strided_conv_rejected():
    cfg = {"input": [4, 4, 1], "layers": [{"kind": "conv2d", "kernel": 3, "channels": 2, "stride": 2}],
           "cut_index": 1, "num_classes": 2}
    with pytest.raises(ConfigError, match=r"layers\[0\]"):
        nn.architecture_from_dict(cfg)
