from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nasxform.errors import ConfigError, ShapeMismatch
from nasxform.ir import ConvSpec
from nasxform.nnet import (
    Batch,
    Layer,
    build_network,
    fisher_channel,
    fisher_channels,
    fisher_decision,
    fisher_layer,
    fisher_potential,
    forward,
    gradients,
    legality_fisher,
    load_network_config,
    make_batch,
    network_config_from_dict,
    repair_chain,
    toy_network_config,
    zero_network,
)


def tiny_specs():
    return [
        ConvSpec(Ci=2, Co=4, H=5, W=5, Kh=3, Kw=3, pad=1),
        ConvSpec(Ci=4, Co=4, H=5, W=5, Kh=3, Kw=3, pad=1, stride=2, groups=2),
        ConvSpec(Ci=4, Co=4, H=3, W=3, Kh=1, Kw=1, bottleneck_out=2),
    ]


def naive_conv(x, w, stride, pad, groups):
    """Direct loops over NCHW / OIHW."""
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    y = np.zeros((n, o, ho, wo))
    og = o // groups
    for b in range(n):
        for co in range(o):
            g = co // og
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, g * cg:(g + 1) * cg, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    y[b, co, i, j] = (patch * w[co]).sum()
    return y


def straight_line_loss(net, batch):
    x = batch.inputs
    for layer, ws in zip(net.layers, net.weights):
        s = layer.spec
        assert len(ws) == 1
        x = x[:, :s.Ci_eff]
        x = naive_conv(x, ws[0], s.stride, s.pad, s.groups)[:, :, :s.Ho_eff, :s.Wo_eff]
        if layer.relu:
            x = np.maximum(x, 0)
    logits = x.mean(axis=(2, 3)) @ net.head_w.T + net.head_b
    m = logits.max(axis=1, keepdims=True)
    logp = logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    return -logp[np.arange(batch.n), batch.labels].mean()


# --------------------------------------------------------------------------- #
# forward

def test_zero_network_loss_is_log_classes():
    net = zero_network(build_network(tiny_specs(), 10, seed=1))
    loss, acts = forward(net, make_batch(net.input_shape, 4, 10, 1))
    assert loss == pytest.approx(math.log(10), rel=1e-12)
    assert all(not a.any() for a in acts)
    assert fisher_potential(net, make_batch(net.input_shape, 4, 10, 1)).total == 0.0


def test_identity_network_is_relu_of_input():
    spec = ConvSpec(Ci=3, Co=3, H=4, W=4)
    net = build_network([spec], 5)
    net.weights[0][0][:] = np.eye(3)[:, :, None, None]
    batch = make_batch((3, 4, 4), 3, 5)
    _, acts = forward(net, batch)
    np.testing.assert_array_equal(acts[0], np.maximum(batch.inputs, 0))


def test_forward_matches_straight_line():
    net = build_network(tiny_specs(), 7, seed=3)
    batch = make_batch(net.input_shape, 3, 7, 3)
    loss, _ = forward(net, batch)
    assert loss == pytest.approx(straight_line_loss(net, batch), rel=1e-12)


def test_batch_and_chain_validation():
    with pytest.raises(ShapeMismatch):
        build_network([ConvSpec(Ci=2, Co=4, H=4, W=4), ConvSpec(Ci=3, Co=4, H=4, W=4)])
    net = build_network([ConvSpec(Ci=2, Co=2, H=3, W=3)], 4)
    with pytest.raises(ShapeMismatch):
        forward(net, make_batch((2, 4, 4), 2, 4))
    with pytest.raises(ShapeMismatch):
        forward(net, Batch(np.zeros((1, 2, 3, 3)), np.array([9])))
    fixed = repair_chain([ConvSpec(Ci=2, Co=8, H=6, W=6, bottleneck_out=2), ConvSpec(Ci=8, Co=4, H=6, W=6)])
    assert fixed[1].Ci == 4


# --------------------------------------------------------------------------- #
# gradients

def _fd_check(net, batch, h=1e-6):
    _, _, _, grads = gradients(net, batch)
    arrays = [w for ws in net.weights for w in ws] + [net.head_w, net.head_b]
    rng = np.random.default_rng(0)
    for arr, g in zip(arrays, grads):
        for flat in rng.choice(arr.size, size=min(arr.size, 6), replace=False):
            idx = np.unravel_index(flat, arr.shape)
            old = arr[idx]
            arr[idx] = old + h
            up = forward(net, batch)[0]
            arr[idx] = old - h
            down = forward(net, batch)[0]
            arr[idx] = old
            fd = (up - down) / (2 * h)
            assert abs(fd - g[idx]) <= 1e-4 * max(abs(fd), abs(g[idx]), 1e-6), (idx, fd, g[idx])


def test_parameter_gradients_match_finite_differences():
    net = build_network(tiny_specs(), 5, seed=2)
    assert sum(w.size for ws in net.weights for w in ws) + net.head_w.size + net.head_b.size <= 1000
    _fd_check(net, make_batch(net.input_shape, 2, 5, 2))


def test_activation_gradients_match_finite_differences():
    net = build_network(tiny_specs()[:2], 4, seed=5)
    batch = make_batch(net.input_shape, 2, 4, 5)
    _, acts, grads, _ = gradients(net, batch)
    h = 1e-6
    rng = np.random.default_rng(1)
    for k, (a, g) in enumerate(zip(acts, grads)):
        for flat in rng.choice(a.size, size=5, replace=False):
            idx = np.unravel_index(flat, a.shape)
            e = np.zeros_like(a)
            e[idx] = h
            fd = (forward(net, batch, {k: e})[0] - forward(net, batch, {k: -e})[0]) / (2 * h)
            assert abs(fd - g[idx]) <= 1e-4 * max(abs(fd), 1e-6)


# --------------------------------------------------------------------------- #
# Fisher

def test_fisher_channel_hand_value():
    assert fisher_channel(np.full((1, 1, 1), 2.0), np.full((1, 1, 1), 3.0)) == 18.0
    assert fisher_channel(np.zeros((3, 2, 2)), np.ones((3, 2, 2))) == 0.0
    with pytest.raises(ShapeMismatch):
        fisher_channel(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


def loop_fisher(A, g):
    n, h, w = A.shape
    total = 0.0
    for i in range(n):
        s = 0.0
        for y in range(h):
            for x in range(w):
                s -= A[i, y, x] * g[i, y, x]
        total += s * s
    return total / (2 * n)


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_fisher_channel_matches_loops(seed, n, c, hw):
    rng = np.random.default_rng(seed)
    A, g = rng.standard_normal((2, n, c, hw, hw))
    per = fisher_channels(A, g)
    for k in range(c):
        ref = loop_fisher(A[:, k], g[:, k])
        assert abs(per[k] - ref) <= 1e-10 * max(abs(ref), 1e-300)
        assert fisher_channel(A[:, k], g[:, k]) == pytest.approx(ref, rel=1e-10)
    assert fisher_layer(A, g) == pytest.approx(per.sum(), rel=1e-12)
    # duplicated examples and permuted channels leave the scores unchanged
    assert fisher_layer(np.concatenate([A, A]), np.concatenate([g, g])) == pytest.approx(fisher_layer(A, g), rel=1e-12)
    perm = rng.permutation(c)
    assert fisher_layer(A[:, perm], g[:, perm]) == pytest.approx(fisher_layer(A, g), rel=1e-12)


def test_fisher_report_invariants_and_determinism():
    cfg = toy_network_config(seed=4)
    r1 = fisher_potential(cfg.build(), cfg.batch())
    r2 = fisher_potential(cfg.build(), cfg.batch())
    assert r1.total == r2.total and r1.per_layer == r2.per_layer
    assert all(v >= 0 for v in r1.per_layer)
    assert r1.total == pytest.approx(sum(r1.per_layer), rel=1e-9)
    assert "total" in r1.format() and json.loads(json.dumps(r1.to_dict()))["seed"] == 4


def test_legality_fisher_reflexive_and_zero_layer():
    cfg = toy_network_config(seed=0)
    net, batch = cfg.build(), cfg.batch()
    assert legality_fisher(net, net, batch).accepted
    dead = cfg.build()
    dead.weights[0][0][:] = 0.0
    d = legality_fisher(net, dead, batch)
    assert not d.accepted and "fisher potential" in d.reason


def test_layer_veto():
    o = fisher_potential(*_toy())
    c = type(o)(list(o.per_layer), o.total + 1.0, o.seed)
    c.per_layer[0] = 0.0
    assert fisher_decision(o, c).accepted
    assert not fisher_decision(o, c, layer_veto=0.5).accepted


def _toy():
    cfg = toy_network_config()
    return cfg.build(), cfg.batch()


# --------------------------------------------------------------------------- #
# configs

def test_network_config_round_trip(tmp_path):
    cfg = toy_network_config(channels=4, depth=2, seed=7)
    p = tmp_path / "net.json"
    p.write_text(json.dumps(cfg.to_dict()))
    back = load_network_config(p)
    assert back.to_dict() == cfg.to_dict()
    assert back.layers[0] == Layer(cfg.layers[0].spec)


@pytest.mark.parametrize("bad", [
    {"layers": [{"Ci": 2, "Co": 2, "H": 2, "W": 2}]},
    {"schema_version": 1},
    {"schema_version": 1, "layers": []},
    {"schema_version": 1, "layers": [{"Ci": 2, "Co": 2, "H": 2, "W": 2, "colour": 1}]},
    {"schema_version": 1, "layers": [{"Ci": 2, "Co": 3, "H": 2, "W": 2, "groups": 2}]},
    {"schema_version": 1, "layers": [{"Ci": 2, "Co": 2, "H": 2, "W": 2}], "seed": -1},
    {"schema_version": 1, "layers": [{"Ci": 2, "Co": 2, "H": 2, "W": 2}, {"Ci": 3, "Co": 2, "H": 2, "W": 2}]},
    {"schema_version": 1, "layers": [{"Ci": 2, "Co": 2, "H": 2, "W": 2}], "extra": 0},
])
def test_network_config_errors(bad):
    with pytest.raises(ConfigError):
        network_config_from_dict(bad)


def test_invalid_json(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{")
    with pytest.raises(ConfigError):
        load_network_config(p)
