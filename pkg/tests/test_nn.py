import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drive2vec import nn
from drive2vec.errors import NumericError, ShapeError

from oracles import scalar_gru

# Scalar GRU with every weight 1, biases 0, x = 1, h0 = 0, evaluated with the
# math module by the scalar oracle.  Frozen to full precision.
SCALAR_STEP = 0.20482421480982513
SCALAR_SEQ = (0.20482421480982513, 0.3467530828749194, 0.4516965920590552)


def ones_params():
    one = np.ones((1, 1))
    zero = np.zeros(1)
    return nn.GruParams(one, one, zero, one.copy(), one.copy(), zero.copy(), one.copy(), one.copy(), zero.copy())


def test_scalar_oracle_frozen_values():
    assert scalar_gru([1.0]) == [SCALAR_STEP]
    assert tuple(scalar_gru([1.0, 1.0, 1.0])) == SCALAR_SEQ
    # z = r = sigmoid(1), h = (1 - z) tanh(1)
    assert SCALAR_STEP == pytest.approx((1 - 1 / (1 + math.exp(-1))) * math.tanh(1), abs=1e-15)


def test_gru_step_matches_scalar_oracle():
    h, cache = nn.gru_cell_step(np.array([1.0]), np.array([0.0]), ones_params())
    assert abs(h[0] - SCALAR_STEP) < 1e-12
    assert cache.z[0] == pytest.approx(0.7310585786300049, abs=1e-12)


def test_gru_sequence_matches_scalar_oracle():
    hs, _ = nn.gru_sequence(np.ones((3, 1)), ones_params())
    np.testing.assert_allclose(hs[:, 0], SCALAR_SEQ, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=8), st.floats(-1, 1), st.floats(-2, 2))
def test_gru_sequence_matches_oracle_on_random_scalars(xs, h0, w):
    p = ones_params()
    for a in (p.Wz, p.Uz, p.Wr, p.Ur, p.Wh, p.Uh):
        a[...] = w
    hs, _ = nn.gru_sequence(np.array(xs)[:, None], p, h0=np.array([h0]))
    np.testing.assert_allclose(hs[:, 0], scalar_gru(xs, h0, w), rtol=0, atol=1e-12)


def test_zero_params_halve_state():
    p = nn.GruParams.zeros(3, 2)
    h, _ = nn.gru_cell_step(np.array([5.0, -1.0, 2.0]), np.array([0.8, -0.4]), p)
    np.testing.assert_allclose(h, [0.4, -0.2], atol=1e-15)
    h, _ = nn.gru_cell_step(np.zeros(3), np.zeros(2), p)
    assert np.all(h == 0.0)


def test_zero_params_sequence_stays_zero():
    hs, caches = nn.gru_sequence(np.random.default_rng(0).normal(size=(10, 3)), nn.GruParams.zeros(3, 4))
    assert hs.shape == (10, 4) and np.all(hs == 0.0) and len(caches) == 10


def test_length_one_sequence_is_one_step():
    rng = np.random.default_rng(1)
    p = nn.GruParams.glorot(3, 5, rng)
    x = rng.normal(size=3)
    h0 = rng.normal(size=5)
    hs, _ = nn.gru_sequence(x[None], p, h0)
    h, _ = nn.gru_cell_step(x, h0, p)
    np.testing.assert_array_equal(hs[0], h)


def test_gate_caches_in_range():
    rng = np.random.default_rng(2)
    p = nn.GruParams.glorot(4, 6, rng)
    _, caches = nn.gru_sequence(rng.normal(size=(10, 7, 4)) * 5, p)
    for c in caches:
        assert np.all((c.z > 0) & (c.z < 1)) and np.all((c.r > 0) & (c.r < 1))
        assert np.all(np.abs(c.c) <= 1)


def test_gru_shape_errors():
    p = nn.GruParams.zeros(3, 2)
    with pytest.raises(ShapeError):
        nn.gru_cell_step(np.zeros(4), np.zeros(2), p)
    with pytest.raises(ShapeError):
        nn.gru_cell_step(np.zeros(3), np.zeros(3), p)
    with pytest.raises(ShapeError):
        nn.gru_sequence(np.zeros((0, 3)), p)
    with pytest.raises(ValueError):
        nn.GruParams(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros(2), np.zeros((2, 3)), np.zeros((2, 2)),
                     np.zeros(3), np.zeros((2, 3)), np.zeros((2, 2)), np.zeros(2))


def test_non_finite_state_raises():
    p = nn.GruParams.zeros(1, 1)
    with pytest.raises(NumericError):
        nn.gru_cell_step(np.array([1.0]), np.array([np.inf]), p)


def test_bptt_matches_finite_differences():
    rng = np.random.default_rng(3)
    p = nn.GruParams.glorot(3, 4, rng)
    xs = rng.normal(size=(5, 2, 3))
    h0 = rng.normal(size=(2, 4)) * 0.3
    proj = rng.normal(size=(5, 2, 4))

    def loss():
        hs, _ = nn.gru_sequence(xs, p, h0)
        return float(np.sum(hs * proj))

    hs, caches = nn.gru_sequence(xs, p, h0)
    dxs, grads, dh0 = nn.gru_sequence_backward(proj, caches, p)
    num = nn.numerical_gradient(loss, p.arrays() + [xs, h0])
    assert nn.max_relative_error(grads.arrays() + [dxs, dh0], num) < 1e-6


def test_dense_elu_and_backward():
    p = nn.DenseParams(np.array([[1.0, -2.0]]), np.array([0.5]), "elu")
    np.testing.assert_allclose(nn.dense_forward(np.array([1.0, 1.0]), p), [math.exp(-0.5) - 1])
    np.testing.assert_allclose(nn.dense_forward(np.array([2.0, 0.0]), p), [2.5])
    rng = np.random.default_rng(4)
    for act in ("elu", "sigmoid", "identity"):
        q = nn.DenseParams.glorot(5, 3, rng, act)
        x = rng.normal(size=(4, 5))
        w = rng.normal(size=(4, 3))
        y, cache = nn.dense_forward_cached(x, q)
        g = nn.DenseParams.zeros(5, 3)
        dx = nn.dense_backward(w, cache, q, g)
        num = nn.numerical_gradient(lambda: float(np.sum(nn.dense_forward(x, q) * w)), [q.W, q.b, x])
        assert nn.max_relative_error([g.W, g.b, dx], num) < 1e-6


def test_dense_rejects_bad_shapes():
    with pytest.raises(ValueError):
        nn.DenseParams(np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(ShapeError):
        nn.dense_forward(np.zeros(4), nn.DenseParams.zeros(3, 2))


def test_mse_values_and_gradient():
    loss, g = nn.mse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
    assert loss == 0.0 and np.all(g == 0)
    loss, _ = nn.mse_loss(np.array([0.0, 0.0]), np.array([1.0, 3.0]))
    assert loss == 5.0
    rng = np.random.default_rng(5)
    p, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    _, g = nn.mse_loss(p, t)
    num = nn.numerical_gradient(lambda: nn.mse_loss(p, t)[0], [p])
    assert nn.max_relative_error([g], num) < 1e-7


def test_bce_values_gradient_and_stability():
    loss, _ = nn.bce_loss(np.array([0.0]), np.array([1.0]))
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    loss, g = nn.bce_loss(np.array([1000.0, -1000.0]), np.array([1.0, 0.0]))
    assert loss == 0.0 and np.all(np.isfinite(g))
    loss, _ = nn.bce_loss(np.array([-1000.0]), np.array([1.0]))
    assert loss == pytest.approx(1000.0)
    rng = np.random.default_rng(6)
    lg, t = rng.normal(size=(3, 4)) * 3, (rng.random((3, 4)) < 0.5).astype(float)
    _, g = nn.bce_loss(lg, t)
    num = nn.numerical_gradient(lambda: nn.bce_loss(lg, t)[0], [lg])
    assert nn.max_relative_error([g], num) < 1e-6
    with pytest.raises(ValueError):
        nn.bce_loss(np.zeros(2), np.array([0.5, 1.0]))


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(7)
    lg = rng.normal(size=(5, 4))
    y = rng.integers(0, 4, 5)
    loss, g = nn.softmax_cross_entropy(lg, y)
    assert loss > 0
    num = nn.numerical_gradient(lambda: nn.softmax_cross_entropy(lg, y)[0], [lg])
    assert nn.max_relative_error([g], num) < 1e-6


def test_adam_first_step_moves_by_lr():
    p = [np.array([1.0, -2.0, 0.5])]
    st_ = nn.AdamState.for_params(p, lr=1e-3)
    nn.adam_step(p, [np.array([0.3, -7.0, 1e-3])], st_)
    # bias-corrected first step is lr * g / (|g| + eps) ~ lr * sign(g)
    np.testing.assert_allclose(p[0], [1.0 - 1e-3, -2.0 + 1e-3, 0.5 - 1e-3], atol=1e-8)
    assert st_.step == 1 and np.all(st_.v[0] >= 0)


def test_adam_zero_gradient_is_noop_and_nan_raises():
    p = [np.array([1.0])]
    st_ = nn.AdamState.for_params(p)
    nn.adam_step(p, [np.zeros(1)], st_)
    assert p[0][0] == 1.0
    with pytest.raises(NumericError):
        nn.adam_step(p, [np.array([np.nan])], st_)


def test_adam_converges_on_quadratic():
    p = [np.array([3.0, -4.0])]
    st_ = nn.AdamState.for_params(p, lr=0.05)
    for _ in range(2000):
        nn.adam_step(p, [2 * p[0]], st_)
    assert np.all(np.abs(p[0]) < 1e-2)


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=10), st.floats(0.1, 10))
def test_clip_bounds_global_norm(vals, max_norm):
    g = [np.array(vals)]
    clipped, norm = nn.clip_by_global_norm(g, max_norm)
    assert nn.global_norm(clipped) <= max_norm * (1 + 1e-12) or norm <= max_norm
    if norm <= max_norm:
        np.testing.assert_array_equal(clipped[0], g[0])


def test_max_relative_error_floor():
    assert nn.max_relative_error([np.array([0.0])], [np.array([1e-9])]) == pytest.approx(1e-2)
    assert nn.max_relative_error([np.array([2.0])], [np.array([1.0])]) == 0.5
