import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from guidelab.tensor import (DegenerateError, GradError, LabelError, NonFiniteError, OptimizerState,
                             RngState, ShapeError, Tensor, backward, clip_grad_norm, no_grad,
                             optimizer_step, randn, zero_grads)
from guidelab.tensor import ops as F
from guidelab.tensor.gradcheck import gradcheck

R = np.random.default_rng(1234)


def rand(*shape):
    return R.standard_normal(shape)


# ---------------------------------------------------------------- randn / rng

def test_randn_rejects_bad_shapes():
    for shape in [(), (0,), (3, -1)]:
        with pytest.raises(ShapeError):
            randn(shape, RngState(0))


def test_randn_deterministic():
    a = randn((4, 4), RngState(7))
    b = randn((4, 4), RngState(7))
    assert np.array_equal(a.data, b.data)


def test_randn_moments():
    x = randn((10000,), RngState(3), dtype=np.float64).data
    assert -0.05 < x.mean() < 0.05
    assert 0.95 < x.std() < 1.05


def test_rng_state_roundtrip():
    r = RngState(5, 1)
    r.gen.standard_normal(3)
    s = RngState.from_json(r.to_json())
    assert np.array_equal(r.gen.standard_normal(5), s.gen.standard_normal(5))


# ---------------------------------------------------------------- matmul

def test_matmul_examples():
    a = Tensor(np.array([[1.0, 2], [3, 4]]))
    b = Tensor(np.array([[5.0], [6]]))
    assert np.array_equal(F.matmul(a, b).data, [[17], [39]])
    A = rand(3, 5)
    assert np.allclose(F.matmul(np.eye(3), A).data, A)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        F.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_gradcheck():
    assert gradcheck(lambda a, b: F.sum(F.matmul(a, b) * F.matmul(a, b)), rand(3, 2), rand(2, 2)) < 1e-6


# ---------------------------------------------------------------- conv / norms

def test_conv2d_examples():
    x = rand(1, 1, 4, 4)
    assert np.allclose(F.conv2d(x, np.ones((1, 1, 1, 1))).data, x)
    x = np.array([[[[1.0, 2], [3, 4]]]])
    assert np.array_equal(F.conv2d(x, np.ones((1, 1, 2, 2))).data, [[[[10.0]]]])


def test_conv2d_output_size_and_error():
    out = F.conv2d(rand(2, 3, 7, 7), rand(4, 3, 3, 3), stride=2, padding=1)
    assert out.shape == (2, 4, 4, 4)
    with pytest.raises(ShapeError):
        F.conv2d(rand(1, 1, 2, 2), rand(1, 1, 3, 3))


def test_conv2d_gradcheck():
    err = gradcheck(lambda x, w, b: F.sum(F.tanh(F.conv2d(x, w, b, stride=1, padding=1))),
                    rand(1, 2, 5, 5), rand(3, 2, 3, 3), rand(3))
    assert err < 1e-5
    err = gradcheck(lambda x, w: F.sum(F.conv2d(x, w, stride=2) ** 2), rand(1, 2, 5, 5), rand(2, 2, 3, 3))
    assert err < 1e-5


def test_batch_norm_examples():
    x = np.column_stack([np.full(6, 3.0), rand(6)])
    out = F.batch_norm(x, np.ones(2), np.zeros(2), mode="batch").data
    assert np.allclose(out[:, 0], 0)
    z = rand(50, 3)
    z = (z - z.mean(0)) / z.std(0)
    assert np.allclose(F.batch_norm(z, np.ones(3), np.zeros(3), mode="batch").data, z, atol=1e-3)


def test_batch_norm_running_stats_and_errors():
    rm, rv = np.zeros(2), np.ones(2)
    x = rand(8, 2) + 5
    F.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, mode="train")
    assert np.allclose(rm, 0.1 * x.mean(0))
    assert np.allclose(rv, 0.9 + 0.1 * x.var(0, ddof=1))
    before = rm.copy()
    F.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, mode="eval")
    assert np.array_equal(rm, before)
    with pytest.raises(DegenerateError):
        F.batch_norm(rand(1, 2), np.ones(2), np.zeros(2), rm, rv, mode="train")


def test_batch_norm_gradcheck():
    w = rand(8, 4)
    err = gradcheck(lambda x, g, b: F.sum(F.batch_norm(x, g, b, mode="batch") * Tensor(w)),
                    rand(8, 4), rand(4), rand(4))
    assert err < 1e-5


def test_layer_norm():
    assert np.allclose(F.layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2)).data, [[1, -1]], atol=1e-4)
    assert np.allclose(F.layer_norm(np.full((1, 5), 2.0), np.ones(5), np.zeros(5)).data, 0)
    with pytest.raises(DegenerateError):
        F.layer_norm(rand(3, 1), np.ones(1), np.zeros(1))
    w = rand(4, 8)
    assert gradcheck(lambda x, g, b: F.sum(F.layer_norm(x, g, b) * Tensor(w)), rand(4, 8), rand(8), rand(8)) < 1e-5


# ---------------------------------------------------------------- elementwise

def test_elementwise_examples():
    assert np.array_equal(F.apply_elementwise("relu", np.array([-1.0, 0, 2])).data, [0, 0, 2])
    assert F.apply_elementwise("tanh", np.array(0.0)).data == 0
    with pytest.raises(ShapeError):
        F.apply_elementwise("add", np.ones(3), np.ones(4))


def test_add_adjoints_equal_upstream():
    a, b = Tensor(rand(3), requires_grad=True), Tensor(rand(3), requires_grad=True)
    g = rand(3)
    backward(F.sum(F.add(a, b) * Tensor(g)))
    assert np.allclose(a.grad, g) and np.allclose(b.grad, g)


@pytest.mark.parametrize("op", ["tanh", "sigmoid", "exp", "gelu"])
def test_unary_gradcheck(op):
    assert gradcheck(lambda x: F.sum(getattr(F, op)(x) * getattr(F, op)(x)), rand(3, 4)) < 1e-6


def test_broadcast_gradcheck():
    err = gradcheck(lambda a, b, c: F.sum((a * b + c) / (F.exp(c) + 1.0)), rand(3, 4), rand(4), rand(3, 1))
    assert err < 1e-6


def test_reshape_transpose_getitem_gradcheck():
    err = gradcheck(lambda x: F.sum(F.transpose(F.reshape(x, (4, 3)))[1:, ::2] ** 2), rand(3, 4))
    assert err < 1e-6
    idx = np.array([0, 2, 2, 1])
    assert gradcheck(lambda x: F.sum(F.getitem(x, idx) ** 3), rand(3, 2)) < 1e-6


def test_softmax_family_gradcheck():
    w = rand(4, 5)
    assert gradcheck(lambda x: F.sum(F.softmax(x) * Tensor(w)), rand(4, 5)) < 1e-6
    assert gradcheck(lambda x: F.sum(F.log_softmax(x) * Tensor(w)), rand(4, 5)) < 1e-6


# ---------------------------------------------------------------- losses

def test_cross_entropy_examples():
    assert F.softmax_cross_entropy(np.zeros((3, 10)), [1, 2, 3]).data == pytest.approx(math.log(10), abs=1e-6)
    logits = np.zeros((2, 4))
    logits[0, 1] = logits[1, 3] = 20.0
    assert F.softmax_cross_entropy(logits, [1, 3]).data < 1e-3
    with pytest.raises(LabelError):
        F.softmax_cross_entropy(np.zeros((2, 3)), [0, 3])


def test_cross_entropy_gradcheck_and_ignore():
    labels = np.array([0, 4, 2, 1])
    assert gradcheck(lambda x: F.softmax_cross_entropy(x, labels), rand(4, 5)) < 1e-6
    x = rand(4, 5)
    full = F.softmax_cross_entropy(x[[0, 2]], [0, 2]).data
    assert F.softmax_cross_entropy(x, [0, -1, 2, -1], ignore_index=-1).data == pytest.approx(full)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(2, 6), st.integers(0, 10_000))
def test_cross_entropy_nonnegative(b, c, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((b, c)) * 5
    assert F.softmax_cross_entropy(x, r.integers(0, c, b)).data >= 0


def test_mse_examples():
    p = rand(3, 2)
    assert F.mse_loss(p, p).data == 0
    assert F.mse_loss(p + 1, p).data == pytest.approx(1.0)
    with pytest.raises(ShapeError):
        F.mse_loss(rand(3), rand(4))
    pred, tgt = Tensor(rand(2, 3), requires_grad=True), rand(2, 3)
    backward(F.mse_loss(pred, tgt))
    assert np.allclose(pred.grad, 2 * (pred.data - tgt) / 6)


def test_bce_gradcheck():
    y = np.array([0.0, 1, 1, 0])
    assert gradcheck(lambda x: F.bce_with_logits(x, y), rand(4)) < 1e-6


# ---------------------------------------------------------------- layers

def test_embedding_and_elman_gradcheck():
    idx = np.array([[0, 2, 1], [1, 1, 0]])
    assert gradcheck(lambda w: F.sum(F.embedding(w, idx) ** 2), rand(3, 4)) < 1e-6
    err = gradcheck(lambda pre, w: F.sum(F.elman_scan(pre, w) * F.elman_scan(pre, w)),
                    rand(2, 5, 3), rand(3, 3) * 0.5)
    assert err < 1e-6


def test_avg_pool_gradcheck():
    assert gradcheck(lambda x: F.sum(F.avg_pool2d(x, 2) ** 2), rand(1, 2, 4, 4)) < 1e-6


# ---------------------------------------------------------------- backward semantics

def test_backward_square():
    x = Tensor(np.array(3.0), requires_grad=True)
    backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_backward_errors():
    x = Tensor(rand(3), requires_grad=True)
    with pytest.raises(GradError):
        backward(x * 2)
    with pytest.raises(GradError):
        backward(Tensor(np.array(1.0)))


def test_backward_accumulates_and_zero_grads():
    x = Tensor(np.array(2.0), requires_grad=True)
    backward(x * x)
    backward(x * x)
    assert x.grad == pytest.approx(8.0)
    zero_grads([x])
    assert x.grad == 0


def test_constant_loss_gives_zero_grad():
    x = Tensor(rand(3), requires_grad=True)
    loss = F.sum(x) * 0.0 + 5.0
    backward(loss)
    assert np.all(x.grad == 0)


def test_no_grad_records_nothing():
    x = Tensor(rand(3), requires_grad=True)
    with no_grad():
        y = F.sum(x * x)
    assert not y.requires_grad


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        F.log(Tensor(np.array([-1.0])))


def test_diamond_graph_visits_once():
    x = Tensor(np.array(1.5), requires_grad=True)
    y = F.tanh(x)
    backward(y * y + y)
    t = np.tanh(1.5)
    assert x.grad == pytest.approx((2 * t + 1) * (1 - t * t))


# ---------------------------------------------------------------- optimizer / clipping

def _param(v, g):
    p = Tensor(np.array([v], dtype=np.float64), requires_grad=True)
    p.grad = np.array([g], dtype=np.float64)
    return p


def test_adamw_worked_example():
    p = _param(1.0, 0.1)
    st_ = OptimizerState.adamw(0.1, weight_decay=0.01)
    optimizer_step(st_, {"p": p})
    assert p.data[0] == pytest.approx(0.899, abs=1e-6)
    assert st_.t == 1


def test_adam_zero_grad_no_change_and_pure_decay():
    p = _param(1.7, 0.0)
    s = OptimizerState.adam(0.1)
    for _ in range(3):
        optimizer_step(s, {"p": p})
    assert p.data[0] == 1.7 and s.t == 3
    p = _param(2.0, 0.0)
    optimizer_step(OptimizerState.adamw(0.1, weight_decay=0.1), {"p": p})
    assert p.data[0] == pytest.approx(0.99 * 2.0)


def test_coupled_weight_decay_enters_gradient():
    # coupled decay: g' = g + wd*p, so with g=0 the first Adam step is -lr*sign(p)
    p = _param(1.0, 0.0)
    optimizer_step(OptimizerState.adam(0.1, weight_decay=0.5), {"p": p})
    assert p.data[0] == pytest.approx(0.9, abs=1e-6)


def test_optimizer_nan_grad():
    p = _param(1.0, float("nan"))
    with pytest.raises(NonFiniteError):
        optimizer_step(OptimizerState.adam(0.1), {"p": p})


def test_optimizer_moments_nonnegative():
    s = OptimizerState.adam(0.01)
    p = Tensor(rand(5), requires_grad=True)
    for _ in range(4):
        p.grad = rand(5)
        optimizer_step(s, {"p": p})
    assert np.all(s.v["p"] >= 0) and s.m["p"].shape == (5,)


def test_clip_examples():
    p = _param(0, 0)
    p.grad = np.array([3.0, 4.0])
    assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
    assert np.allclose(p.grad, [0.6, 0.8])
    q = _param(0, 0.5)
    clip_grad_norm([q], 1.0)
    assert q.grad[0] == 0.5


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 10))
def test_clip_never_increases_norm(seed, max_norm):
    r = np.random.default_rng(seed)
    ps = [Tensor(np.zeros(3), requires_grad=True) for _ in range(3)]
    for p in ps:
        p.grad = r.standard_normal(3) * r.uniform(0.01, 5)
    before = np.sqrt(sum((p.grad ** 2).sum() for p in ps))
    clip_grad_norm(ps, max_norm)
    after = np.sqrt(sum((p.grad ** 2).sum() for p in ps))
    assert after <= before + 1e-12
    assert after == pytest.approx(min(before, max_norm), rel=1e-6)


def test_determinism_forward_backward_step():
    def run():
        r = RngState(11)
        w = randn((4, 3), r, dtype=np.float32, requires_grad=True)
        x = randn((8, 4), r, dtype=np.float32)
        s = OptimizerState.adam(1e-2)
        for _ in range(3):
            zero_grads([w])
            backward(F.sum(F.tanh(F.matmul(x, w)) ** 2))
            optimizer_step(s, {"w": w})
        return w.data
    assert np.array_equal(run(), run())
