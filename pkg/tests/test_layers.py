import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bbnn.layers import (
    BatchNorm,
    BnConvUnit,
    DenseHead,
    batchnorm_forward,
    dense_softmax_forward,
    relu,
    relu_backward,
    softmax,
)
from bbnn.tensor import ShapeError

from oracles import max_rel_error, numeric_grad, softmax64


# --- batch norm ---------------------------------------------------------------

def test_bn_standardizes_in_training():
    x = np.random.default_rng(0).normal(3.0, 5.0, (4, 6, 5, 3)).astype(np.float32)
    y = batchnorm_forward(x, BatchNorm(3), training=True)
    np.testing.assert_allclose(y.mean(axis=(0, 1, 2)), 0, atol=1e-4)
    np.testing.assert_allclose(y.var(axis=(0, 1, 2)), 1, atol=1e-4)


def test_bn_affine():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 8, 8, 2))
    x = ((x - x.mean(axis=(0, 1, 2))) / x.std(axis=(0, 1, 2))).astype(np.float32)
    bn = BatchNorm(2)
    bn.params["gamma"][:] = 2
    bn.params["beta"][:] = 3
    y = bn.forward(x, training=True)
    np.testing.assert_allclose(y.mean(axis=(0, 1, 2)), 3, atol=1e-3)
    np.testing.assert_allclose(y.std(axis=(0, 1, 2)), 2, atol=1e-3)


def test_bn_inference_is_affine_and_stateless():
    rng = np.random.default_rng(2)
    bn = BatchNorm(3)
    for _ in range(5):
        bn.forward(rng.normal(1.0, 2.0, (2, 4, 4, 3)).astype(np.float32), training=True)
    before = {k: v.copy() for k, v in bn.buffers.items()}
    x = rng.standard_normal((2, 4, 4, 3)).astype(np.float32)
    a, b = bn.forward(x), bn.forward(x)
    assert a.tobytes() == b.tobytes()
    for k in before:
        assert before[k].tobytes() == bn.buffers[k].tobytes()
    scale = bn.params["gamma"] / np.sqrt(bn.buffers["running_var"] + bn.eps)
    shift = bn.params["beta"] - bn.buffers["running_mean"] * scale
    np.testing.assert_allclose(a, x * scale + shift, rtol=1e-5, atol=1e-6)


def test_bn_running_stats_track_batches():
    rng = np.random.default_rng(3)
    bn = BatchNorm(2)
    for _ in range(400):
        bn.forward(rng.normal([2.0, -1.0], [3.0, 0.5], (8, 4, 4, 2)).astype(np.float32), training=True)
    np.testing.assert_allclose(bn.buffers["running_mean"], [2.0, -1.0], atol=0.1)
    np.testing.assert_allclose(bn.buffers["running_var"], [9.0, 0.25], rtol=0.1)


def test_bn_first_update_equals_batch_stats():
    x = np.random.default_rng(4).normal(5.0, 2.0, (4, 3, 3, 2)).astype(np.float32)
    bn = BatchNorm(2)
    bn.forward(x, training=True)
    np.testing.assert_allclose(bn.buffers["running_mean"], x.mean(axis=(0, 1, 2)), rtol=1e-5)
    np.testing.assert_allclose(bn.buffers["running_var"], x.var(axis=(0, 1, 2)), rtol=1e-5)


@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=6))
@settings(max_examples=40, deadline=None)
def test_bn_running_var_stays_positive(values):
    bn = BatchNorm(1)
    for v in values:
        bn.forward(np.full((1, 2, 2, 1), v, np.float32), training=True)  # zero batch variance
        assert bn.buffers["running_var"][0] > 0


def test_bn_errors():
    with pytest.raises(ShapeError):
        BatchNorm(3).forward(np.zeros((1, 2, 2, 4), np.float32))
    with pytest.raises(ShapeError):
        BatchNorm(3).forward(np.zeros((1, 1, 1, 3), np.float32), training=True)


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("training", [True, False])
def test_bn_finite_differences(seed, training):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 4, 4, 3))
    bn = BatchNorm(3, dtype=np.float64)
    bn.params["gamma"][:] = rng.uniform(0.5, 2, 3)
    bn.params["beta"][:] = rng.standard_normal(3)
    bn.buffers["running_mean"][:] = rng.standard_normal(3)
    bn.buffers["running_var"][:] = rng.uniform(0.5, 2, 3)
    bn.buffers["steps"][:] = 1e6  # freeze the moving averages' bias correction
    g = rng.standard_normal(x.shape)
    saved = {k: v.copy() for k, v in bn.buffers.items()}

    def loss(v=None, gamma=None, beta=None):
        for k in saved:
            bn.buffers[k][...] = saved[k]
        old = bn.params["gamma"].copy(), bn.params["beta"].copy()
        if gamma is not None:
            bn.params["gamma"][...] = gamma
        if beta is not None:
            bn.params["beta"][...] = beta
        out = float((bn.forward(x if v is None else v, training) * g).sum())
        bn.params["gamma"][...], bn.params["beta"][...] = old
        return out

    loss()
    gx = bn.backward(g)
    gg, gb = bn.grads["gamma"].copy(), bn.grads["beta"].copy()
    assert max_rel_error(gx, numeric_grad(lambda v: loss(v=v), x)) < 1e-3
    assert max_rel_error(gg, numeric_grad(lambda v: loss(gamma=v), bn.params["gamma"])) < 1e-3
    assert max_rel_error(gb, numeric_grad(lambda v: loss(beta=v), bn.params["beta"])) < 1e-3


# --- relu ---------------------------------------------------------------------

def test_relu_cases():
    rng = np.random.default_rng(5)
    neg = -rng.uniform(0.1, 2, (1, 3, 3, 2)).astype(np.float32)
    pos = rng.uniform(0.1, 2, (1, 3, 3, 2)).astype(np.float32)
    assert not relu(neg).any()
    assert relu(pos).tobytes() == pos.tobytes()
    mixed = rng.standard_normal((2, 4, 4, 3)).astype(np.float32)
    ref = np.array([v if v > 0 else 0.0 for v in mixed.ravel()], np.float32).reshape(mixed.shape)
    assert relu(mixed).tobytes() == ref.tobytes()


def test_relu_backward_masks_at_zero():
    x = np.array([-1.0, 0.0, 2.0], np.float32).reshape(1, 1, 3, 1)
    g = relu_backward(x, np.ones_like(x))
    np.testing.assert_array_equal(g.ravel(), [0, 0, 1])


# --- dense + softmax ----------------------------------------------------------

def test_softmax_zero_head_uniform():
    x = np.random.default_rng(6).standard_normal((3, 1, 1, 32)).astype(np.float32)
    p = dense_softmax_forward(x, DenseHead(32, 10))
    assert np.all(p == np.float32(0.1))


def test_softmax_saturates():
    head = DenseHead(32, 10)
    head.params["bias"][0] = 1e4
    p = dense_softmax_forward(np.ones((1, 1, 1, 32), np.float32), head)
    assert p[0, 0] >= 1 - 1e-6


def test_dense_softmax_matches_float64_oracle():
    rng = np.random.default_rng(7)
    head = DenseHead(32, 10, rng)
    head.params["bias"][:] = rng.standard_normal(10)
    x = rng.standard_normal((5, 1, 1, 32)).astype(np.float32)
    p = dense_softmax_forward(x, head)
    ref = softmax64(x.reshape(5, 32).astype(np.float64) @ head.params["weight"] + head.params["bias"])
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)
    np.testing.assert_allclose(p, ref, atol=1e-5)


@given(st.lists(st.floats(-1e4, 1e4, allow_nan=False, width=32), min_size=2, max_size=12))
@settings(max_examples=60, deadline=None)
def test_softmax_stable_for_large_logits(logits):
    p = softmax(np.array([logits], np.float32))
    assert np.all(np.isfinite(p))
    assert abs(float(p.sum()) - 1) < 1e-6
    assert np.all((p >= 0) & (p <= 1))


def test_dense_head_param_count_and_shape_error():
    assert DenseHead(32, 10).n_params == 330
    with pytest.raises(ShapeError):
        DenseHead(32, 10).forward(np.zeros((1, 2, 1, 32), np.float32))


@pytest.mark.parametrize("seed", range(20))
def test_dense_finite_differences(seed):
    rng = np.random.default_rng(seed)
    head = DenseHead(6, 4, rng, dtype=np.float64)
    x = rng.standard_normal((3, 1, 1, 6))
    g = rng.standard_normal((3, 4))
    head.forward(x)
    gx = head.backward(g)
    w = head.params["weight"]

    def with_w(v):
        old = w.copy()
        w[...] = v
        out = float((head.forward(x) * g).sum())
        w[...] = old
        return out

    assert max_rel_error(gx, numeric_grad(lambda v: float((head.forward(v) * g).sum()), x)) < 1e-3
    assert max_rel_error(head.grads["weight"], numeric_grad(with_w, w)) < 1e-3


# --- BN -> ReLU -> Conv unit --------------------------------------------------

@given(h=st.integers(2, 7), w=st.integers(2, 7), k=st.sampled_from([1, 3, 5]))
@settings(max_examples=20, deadline=None)
def test_unit_preserves_spatial_shape(h, w, k):
    unit = BnConvUnit(k, 3, 5, np.random.default_rng(0))
    assert unit.forward(np.ones((2, h, w, 3), np.float32), training=True).shape == (2, h, w, 5)


@pytest.mark.parametrize("seed", range(20))
def test_unit_finite_differences(seed):
    rng = np.random.default_rng(seed)
    unit = BnConvUnit(3, 2, 3, rng, dtype=np.float64)
    unit.bn.params["beta"][:] = rng.standard_normal(2)
    x = rng.standard_normal((2, 4, 4, 2))
    g = rng.standard_normal((2, 4, 4, 3))
    params = dict(unit.named_parameters())
    buffers = {k: v.copy() for k, v in unit.named_buffers()}

    def loss(v=None, name=None, value=None):
        for k, b in unit.named_buffers():
            b[...] = buffers[k]
        old = params[name].copy() if name else None
        if name:
            params[name][...] = value
        out = float((unit.forward(x if v is None else v, training=True) * g).sum())
        if name:
            params[name][...] = old
        return out

    loss()
    gx = unit.backward(g)
    grads = {k: v.copy() for k, v in unit.named_gradients()}
    assert max_rel_error(gx, numeric_grad(lambda v: loss(v=v), x)) < 1e-3
    for name, p in params.items():
        num = numeric_grad(lambda v, n=name: loss(name=n, value=v), p)
        assert max_rel_error(grads[name], num) < 1e-3, name
