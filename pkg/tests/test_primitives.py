import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shakti_forge import tensor as T
from shakti_forge.primitives import (
    PosBiasTable,
    RopeContext,
    abs_pos_bias,
    layer_norm,
    qk_normalize,
    rms_norm,
    rope_1d,
    rope_2d,
    rope_dynamic_scale,
    silu,
    swiglu_ffn,
)
from shakti_forge.tensor import Tensor

import oracles


def f64(x):
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)


# ---------------------------------------------------------------- layer norm


def test_layer_norm_constant_row_is_zero():
    out = layer_norm(Tensor(np.full((1, 6), 3.0)), Tensor(np.ones(6)), Tensor(np.zeros(6)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 6)))


def test_layer_norm_two_values():
    with T.precision(np.float64):
        out = layer_norm(Tensor([[1.0, 3.0]]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), eps=1e-12)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-9)


def test_layer_norm_matches_oracle():
    rng = np.random.default_rng(0)
    x, g, b = rng.standard_normal(7), rng.standard_normal(7), rng.standard_normal(7)
    expected = oracles.layer_norm(x.tolist(), g.tolist(), b.tolist(), 1e-5)
    with T.precision(np.float64):
        got = layer_norm(Tensor(x[None]), Tensor(g), Tensor(b)).data[0]
    np.testing.assert_allclose(got, expected, atol=1e-6)


# ---------------------------------------------------------------- rms norm


def test_rms_norm_three_four():
    out = rms_norm(Tensor([[3.0, 4.0]]), Tensor([1.0, 1.0]))
    np.testing.assert_allclose(out.data, [[0.84853, 1.13137]], atol=1e-5)
    np.testing.assert_allclose(oracles.rms_norm([3.0, 4.0], [1, 1], 1e-6), [0.84853, 1.13137], atol=1e-5)


def test_rms_norm_ones_fixed_point():
    out = rms_norm(Tensor(np.ones((2, 5))), Tensor(np.ones(5)))
    np.testing.assert_allclose(out.data, np.ones((2, 5)), atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_rms_norm_scale_invariant(c, seed):
    x = np.random.default_rng(seed).standard_normal((3, 8))
    with T.precision(np.float64):
        g = Tensor(np.ones(8))
        a = rms_norm(Tensor(x), g, eps=1e-14).data
        b = rms_norm(Tensor(c * x), g, eps=1e-14).data
    np.testing.assert_allclose(a, b, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 100.0), st.floats(-50, 50), st.integers(0, 1000))
def test_layer_norm_shift_scale_invariant(c, shift, seed):
    x = np.random.default_rng(seed).standard_normal((3, 8))
    with T.precision(np.float64):
        g, b = Tensor(np.ones(8)), Tensor(np.zeros(8))
        a = layer_norm(Tensor(x), g, b, eps=1e-14).data
        y = layer_norm(Tensor(c * x + shift), g, b, eps=1e-14).data
    np.testing.assert_allclose(a, y, atol=1e-6)


# ---------------------------------------------------------------- activations


def test_silu_values():
    out = silu(Tensor([0.0, 1.0])).data
    assert out[0] == 0.0
    assert out[1] == pytest.approx(oracles.silu(1.0), abs=1e-6)
    assert oracles.silu(1.0) == pytest.approx(0.73106, abs=1e-5)


def test_silu_reflection_identity():
    x = np.random.default_rng(1).standard_normal(100) * 4
    with T.precision(np.float64):
        lhs = silu(Tensor(-x)).data
        rhs = -x + silu(Tensor(x)).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_swiglu_zero_input_and_zero_gate():
    rng = np.random.default_rng(2)
    w1, w3, w2 = rng.standard_normal((4, 8)), rng.standard_normal((4, 8)), rng.standard_normal((8, 4))
    np.testing.assert_array_equal(swiglu_ffn(Tensor(np.zeros((1, 4))), Tensor(w1), Tensor(w3), Tensor(w2)).data, 0)
    x = rng.standard_normal((1, 4))
    out = swiglu_ffn(Tensor(x), Tensor(w1), Tensor(np.zeros((4, 8))), Tensor(w2)).data
    np.testing.assert_array_equal(out, 0)


def test_swiglu_matches_oracle():
    rng = np.random.default_rng(3)
    x, w1, w3, w2 = (rng.standard_normal(s) for s in ((1, 4), (4, 8), (4, 8), (8, 4)))
    expected = oracles.swiglu(x[0].tolist(), w1.tolist(), w3.tolist(), w2.tolist())
    with T.precision(np.float64):
        got = swiglu_ffn(Tensor(x), Tensor(w1), Tensor(w3), Tensor(w2)).data[0]
    np.testing.assert_allclose(got, expected, atol=1e-5)


def test_swiglu_shape_mismatch():
    with pytest.raises(T.DimensionError):
        swiglu_ffn(Tensor(np.ones((1, 4))), Tensor(np.ones((3, 8))), Tensor(np.ones((4, 8))),
                   Tensor(np.ones((8, 4))))


# ---------------------------------------------------------------- QK norm


def test_qk_normalize_unit_rms():
    rng = np.random.default_rng(4)
    q, k = rng.standard_normal((2, 5, 16)) * 7, rng.standard_normal((2, 5, 16)) * 0.1
    with T.precision(np.float64):
        g = Tensor(np.ones(16))
        qn, kn = qk_normalize(Tensor(q), Tensor(k), g, g, eps=1e-14)
    for arr in (qn.data, kn.data):
        np.testing.assert_allclose(np.sqrt((arr ** 2).mean(-1)), 1.0, atol=1e-6)


def test_qk_normalize_scale_invariant():
    rng = np.random.default_rng(5)
    q, k = rng.standard_normal((2, 5, 16)), rng.standard_normal((2, 5, 16))
    with T.precision(np.float64):
        g = Tensor(np.ones(16))
        a = qk_normalize(Tensor(10 * q), Tensor(k), g, g, eps=1e-14)
        b = qk_normalize(Tensor(q), Tensor(k), g, g, eps=1e-14)
    np.testing.assert_allclose(a[0].data, b[0].data, atol=1e-6)
    np.testing.assert_array_equal(a[1].data, b[1].data)


def test_qk_logit_bound_brute_force():
    rng = np.random.default_rng(6)
    dh = 64
    g = Tensor(np.ones(dh))
    worst = 0.0
    for _ in range(1000):
        q, k = rng.standard_normal((1, dh)) * rng.uniform(0.1, 100), rng.standard_normal((1, dh))
        qn, kn = qk_normalize(Tensor(q), Tensor(k), g, g)
        worst = max(worst, abs((qn.data @ kn.data.T).item() / math.sqrt(dh)))
    assert worst <= 8.0 + 1e-6
    # the bound is attained by parallel vectors
    v = rng.standard_normal((1, dh))
    qn, kn = qk_normalize(Tensor(v), Tensor(3 * v), g, g)
    assert (qn.data @ kn.data.T).item() / 8.0 == pytest.approx(8.0, rel=1e-5)


# ---------------------------------------------------------------- RoPE


def _ctx(dh, theta=10000.0):
    return RopeContext(theta, dh, trained_max_len=64)


def test_rope_position_zero_is_identity():
    x = np.random.default_rng(7).standard_normal((3, 8))
    out = rope_1d(Tensor(x), [0, 0, 0], _ctx(8)).data
    np.testing.assert_allclose(out, x.astype(np.float32), atol=0)


def test_rope_odd_dim_rejected():
    with pytest.raises(ValueError):
        rope_1d(Tensor(np.ones((2, 5))), [0, 1], _ctx(6))
    with pytest.raises(ValueError):
        RopeContext(10000.0, 5, 64)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 5000))
def test_rope_preserves_norm(seed, pos):
    x = np.random.default_rng(seed).standard_normal((1, 16))
    with T.precision(np.float64):
        out = rope_1d(Tensor(x), [pos], _ctx(16)).data
    assert abs(np.linalg.norm(out) - np.linalg.norm(x)) < 1e-6


def test_rope_relative_identity():
    rng = np.random.default_rng(8)
    q, k = rng.standard_normal((1, 32)), rng.standard_normal((1, 32))
    ctx = _ctx(32)
    with T.precision(np.float64):
        def score(m, n):
            return (rope_1d(Tensor(q), [m], ctx).data @ rope_1d(Tensor(k), [n], ctx).data.T).item()
        assert abs(score(5, 3) - score(7, 5)) < 1e-9
        assert abs(score(100, 0) - score(140, 40)) < 1e-9


def test_rope_2d_identity_norm_and_relative():
    rng = np.random.default_rng(9)
    ctx = _ctx(16)
    x = rng.standard_normal((1, 16))
    with T.precision(np.float64):
        np.testing.assert_array_equal(rope_2d(Tensor(x), [0], [0], ctx).data, x)
        out = rope_2d(Tensor(x), [3], [11], ctx).data
        assert abs(np.linalg.norm(out) - np.linalg.norm(x)) < 1e-6
        q, k = rng.standard_normal((1, 16)), rng.standard_normal((1, 16))

        def score(a, b):
            qa = rope_2d(Tensor(q), [a[0]], [a[1]], ctx).data
            kb = rope_2d(Tensor(k), [b[0]], [b[1]], ctx).data
            return (qa @ kb.T).item()

        assert abs(score((2, 3), (5, 7)) - score((1, 1), (4, 5))) < 1e-9


def test_rope_2d_needs_dim_divisible_by_four():
    with pytest.raises(ValueError):
        rope_2d(Tensor(np.ones((1, 6))), [0], [0], _ctx(6))


def test_rope_2d_halves_are_independent_1d_ropes():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((4, 16))
    rows, cols = [0, 1, 2, 3], [3, 0, 2, 1]
    with T.precision(np.float64):
        ctx2, ctx1 = _ctx(16), _ctx(8)
        full = rope_2d(Tensor(x), rows, cols, ctx2).data
        np.testing.assert_allclose(full[:, :8], rope_1d(Tensor(x[:, :8]), rows, ctx1).data, atol=1e-12)
        np.testing.assert_allclose(full[:, 8:], rope_1d(Tensor(x[:, 8:]), cols, ctx1).data, atol=1e-12)


def test_dynamic_scale_rule():
    assert rope_dynamic_scale(125000, 4096, 4096, 64) == 125000
    assert rope_dynamic_scale(125000, 4096, 100, 64) == 125000
    expected = 125000 * 2 ** (64 / 62)
    assert rope_dynamic_scale(125000, 4096, 8192, 64) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(255_700, rel=1e-3)
    with pytest.raises(ValueError):
        rope_dynamic_scale(125000, 10, 20, 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(65, 10_000), st.integers(1, 1000))
def test_dynamic_scale_monotone(target, extra):
    a = rope_dynamic_scale(10000.0, 64, target, 32)
    b = rope_dynamic_scale(10000.0, 64, target + extra, 32)
    assert b > a >= 10000.0


def test_rope_context_linear_scaling_compresses_positions():
    ctx = RopeContext(10000.0, 8, 64, scaling="linear").extend_to(128)
    assert ctx.effective_theta == 10000.0 and ctx.position_scale == 0.5
    x = np.random.default_rng(0).standard_normal((1, 8))
    a = rope_1d(Tensor(x), [10], ctx).data
    b = rope_1d(Tensor(x), [5], _ctx(8)).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_rope_context_effective_theta_not_below_base():
    ctx = RopeContext(500000.0, 64, 32768)
    for target in (1, 32768, 65536):
        assert ctx.extend_to(target).effective_theta >= 500000.0


# ---------------------------------------------------------------- positional bias


def test_abs_pos_bias_identity_grid():
    table = np.random.default_rng(11).standard_normal((3, 4, 5))
    out = abs_pos_bias(3, 4, PosBiasTable(Tensor(table))).data
    np.testing.assert_array_equal(out, table.reshape(12, 5).astype(np.float32))


def test_abs_pos_bias_center_is_corner_mean():
    table = np.random.default_rng(12).standard_normal((2, 2, 3))
    with T.precision(np.float64):
        out = abs_pos_bias(3, 3, PosBiasTable(Tensor(table))).data.reshape(3, 3, 3)
    np.testing.assert_allclose(out[1, 1], table.reshape(4, 3).mean(0), atol=1e-12)


def test_abs_pos_bias_matches_bilinear_oracle():
    table = np.random.default_rng(13).standard_normal((4, 4, 2))
    with T.precision(np.float64):
        out = abs_pos_bias(7, 7, PosBiasTable(Tensor(table))).data.reshape(7, 7, 2)
    for c in range(2):
        expected = oracles.bilinear_resample(table[:, :, c].tolist(), 7, 7)
        np.testing.assert_allclose(out[:, :, c], expected, atol=1e-6)


def test_abs_pos_bias_zero_grid():
    with pytest.raises(ValueError):
        abs_pos_bias(0, 3, PosBiasTable(Tensor(np.ones((2, 2, 1)))))


# ---------------------------------------------------------------- gradients


GRAD_CASES = {
    "layer_norm": (lambda x, g, b: layer_norm(x, g, b), lambda r: [r.standard_normal((3, 6)), r.standard_normal(6),
                                                                   r.standard_normal(6)]),
    "rms_norm": (lambda x, g: rms_norm(x, g), lambda r: [r.standard_normal((3, 6)), r.standard_normal(6)]),
    "silu": (silu, lambda r: [r.standard_normal((4, 3))]),
    # half-scale weights keep the cubic truncation term of the difference quotient small
    "swiglu": (swiglu_ffn, lambda r: [r.standard_normal((2, 4))] + [0.5 * r.standard_normal(s)
                                                                    for s in ((4, 8), (4, 8), (8, 4))]),
    "qk_normalize": (lambda q, k, gq, gk: T.concat(list(qk_normalize(q, k, gq, gk)), axis=0),
                     lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((2, 3, 4)), r.standard_normal(4),
                                r.standard_normal(4)]),
    "rope_1d": (lambda x: rope_1d(x, [0, 3, 9], _ctx(8)), lambda r: [r.standard_normal((2, 3, 8))]),
    "rope_2d": (lambda x: rope_2d(x, [0, 1, 2], [2, 0, 1], _ctx(8)), lambda r: [r.standard_normal((3, 8))]),
    "abs_pos_bias": (lambda t: abs_pos_bias(5, 3, PosBiasTable(t)), lambda r: [r.standard_normal((3, 2, 4))]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradcheck_primitives(name):
    op, make = GRAD_CASES[name]
    for seed in range(10):
        err = T.gradcheck(op, make(np.random.default_rng(seed)), seed=seed)
        assert err < 1e-4, f"{name} seed {seed}: {err}"
