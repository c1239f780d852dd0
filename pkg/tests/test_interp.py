from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nasxform.errors import ParseError, ShapeMismatch, UnboundTensor
from nasxform.interp import (
    ExecEnv,
    bind,
    conv_numpy,
    count_macs,
    execute,
    execute_sequential,
    format_tensor_text,
    load_tensor,
    load_tensor_any,
    parse_tensor_text,
    random_problem,
    realizes,
    reference_conv,
    save_tensor,
)
from nasxform.ir import ConvSpec, conv_nest

from strategies import conv_specs


def _run(spec, seed=0, mode="int"):
    nest = conv_nest(spec)
    x, ws = random_problem(spec, np.random.default_rng(seed))
    env = bind(nest, spec, x, ws, mode)
    return nest, env, x, ws


@given(conv_specs(), st.integers(0, 2 ** 16))
def test_vectorised_interpreter_matches_reference(spec, seed):
    nest, env, x, ws = _run(spec, seed)
    want = reference_conv(spec, x, ws)
    assert np.array_equal(execute(nest, env), want)
    assert np.array_equal(conv_numpy(spec, x, ws), want)
    assert count_macs(nest) == spec.macs


@given(conv_specs(max_dim=4))
def test_sequential_interpreter_matches_vectorised(spec):
    nest, env, *_ = _run(spec)
    assert np.array_equal(execute_sequential(nest, env), execute(nest, env))


@pytest.mark.parametrize("spec", [
    ConvSpec(Ci=4, Co=4, H=5, W=5, Kh=3, Kw=3, groups=4),
    ConvSpec(Ci=4, Co=8, H=4, W=4, Kh=3, Kw=3, pad=1, channel_splits=(((0, 4), 2), ((4, 8), 4))),
    ConvSpec(Ci=6, Co=4, H=6, W=6, Kh=3, Kw=3, pad=1, bottleneck_in=3),
    ConvSpec(Ci=2, Co=4, H=8, W=8, Kh=3, Kw=3, pad=1, bottleneck_spatial=(2, 4)),
])
def test_neural_variants_realise_their_spec(spec):
    nest = conv_nest(spec)
    assert realizes(nest, spec, seed=3)
    assert count_macs(nest) == spec.macs


def test_float_mode():
    spec = ConvSpec(Ci=3, Co=2, H=4, W=4, Kh=3, Kw=3, pad=1)
    nest = conv_nest(spec)
    rng = np.random.default_rng(0)
    x, w = rng.standard_normal(spec.input_shape), rng.standard_normal(spec.weight_shapes[0])
    got = execute(nest, bind(nest, spec, x, w, mode="float"))
    assert got.dtype == np.float64
    np.testing.assert_allclose(got, reference_conv(spec, x, w), rtol=1e-12, atol=1e-12)


def test_reference_conv_hand_example():
    # 1 channel, 2x2 kernel of ones over a 3x3 ramp: sums of 2x2 windows
    spec = ConvSpec(Ci=1, Co=1, H=3, W=3, Kh=2, Kw=2)
    x = np.arange(9).reshape(1, 3, 3)
    out = reference_conv(spec, x, np.ones((1, 1, 2, 2), dtype=np.int64))
    assert out.tolist() == [[[8, 12], [20, 24]]]


def test_binding_errors():
    spec = ConvSpec(Ci=2, Co=2, H=3, W=3)
    nest = conv_nest(spec)
    with pytest.raises(UnboundTensor):
        execute(nest, ExecEnv({"I": np.zeros((2, 3, 3))}))
    with pytest.raises(ShapeMismatch):
        execute(nest, ExecEnv({"I": np.zeros((2, 3, 4)), "W": np.zeros((2, 2, 1, 1))}))
    with pytest.raises(ShapeMismatch):
        reference_conv(spec, np.zeros((2, 3, 3)), np.zeros((2, 1, 1, 1)))


@given(shape=st.lists(st.integers(1, 4), min_size=0, max_size=4), as_float=st.booleans(),
       seed=st.integers(0, 100))
def test_tensor_file_round_trip(tmp_path_factory, shape, as_float, seed):
    rng = np.random.default_rng(seed)
    arr = rng.standard_normal(shape) if as_float else rng.integers(-50, 50, size=shape)
    path = tmp_path_factory.mktemp("t") / "x.bin"
    save_tensor(path, arr)
    back = load_tensor(path)
    assert back.dtype == arr.dtype and np.array_equal(back, arr)
    assert np.array_equal(load_tensor_any(path), arr)
    assert np.array_equal(parse_tensor_text(format_tensor_text(arr)), arr)


def test_corrupt_tensor_files(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"\x01\x00")
    with pytest.raises(ParseError):
        load_tensor(p)
    with pytest.raises(ParseError):
        parse_tensor_text("shape 2 2\nmode int64\n1 2 3")
