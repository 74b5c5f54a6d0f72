import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from guidelab.guidance import (GuidanceConfig, LayerMapping, MappingError, compute_layer_mapping,
                               flatten_activation, guide_batch, guided_loss)
from guidelab.nets import ActivationRecord, NetworkSpec, build_network, forward_with_taps
from guidelab.similarity import DegenerateBatchError
from guidelab.tensor import RngState, Tensor, backward, no_grad
from guidelab.tensor import ops as F


def enumerate_mapping(t, l):
    """Independent re-implementation with exact rationals."""
    if l == 1:
        return [(0, t - 1)]
    out = []
    for i in range(l):
        v = Fraction(i * (t - 1), l - 1)
        fl = v.numerator // v.denominator
        r = fl + 1 if v - fl >= Fraction(1, 2) else fl
        out.append((i, min(max(r, 0), t - 1)))
    return out


def test_mapping_examples():
    assert compute_layer_mapping(4, 2).pairs == ((0, 0), (1, 3))
    assert compute_layer_mapping(5, 5).pairs == tuple((i, i) for i in range(5))
    assert compute_layer_mapping(7, 1).pairs == ((0, 6),)
    assert compute_layer_mapping(4, 3).pairs == ((0, 0), (1, 2), (2, 3))  # 1.5 rounds up
    assert compute_layer_mapping(7, 3).step == Fraction(3)


def test_mapping_exhaustive():
    for t in range(1, 13):
        for l in range(1, t + 1):
            m = compute_layer_mapping(t, l)
            assert list(m.pairs) == enumerate_mapping(t, l)
            assert len(m.pairs) == l
            tgt = [p[1] for p in m.pairs]
            assert tgt == sorted(tgt)
            assert all(0 <= v < t for v in tgt)
            if l > 1:
                assert tgt[0] == 0 and tgt[-1] == t - 1


def test_mapping_errors():
    with pytest.raises(MappingError):
        compute_layer_mapping(3, 4)
    with pytest.raises(MappingError):
        compute_layer_mapping(0, 0)


def test_guidance_config():
    assert not GuidanceConfig().enabled
    g = GuidanceConfig("untrained", disconnect_after_steps=150)
    assert g.active_at(150) and not g.active_at(151)
    for bad in (dict(guide_mode="x"), dict(metric="cca"), dict(disconnect_after_steps=0), dict(loss_weight=0.5)):
        with pytest.raises(ValueError):
            GuidanceConfig(**bad)


def test_flatten_activation():
    r = np.random.default_rng(0)
    assert flatten_activation(r.standard_normal((2, 3, 4, 4))).shape == (2, 48)
    x = r.standard_normal((2, 5, 8))
    assert flatten_activation(x, np.ones((2, 5), bool)).shape == (2, 40)
    y = r.standard_normal((16, 32))
    assert np.array_equal(flatten_activation(y).data, y)
    m = np.ones((2, 5), bool)
    m[1, 3:] = False
    f = flatten_activation(x, m).data.reshape(2, 5, 8)
    assert np.all(f[1, 3:] == 0) and np.array_equal(f[0], x[0])
    with pytest.raises(ValueError):
        flatten_activation(x, np.ones((2, 4), bool))


def test_guide_batch():
    x = np.random.default_rng(0).random((64, 3, 16, 16)).astype(np.float32)
    assert guide_batch(x, "same") is x
    n = guide_batch(x, "noise", RngState(1))
    assert n.shape == x.shape and -0.05 < n.mean() < 0.05 and 0.95 < n.std() < 1.05
    assert np.array_equal(n, guide_batch(x, "noise", RngState(1)))
    toks = np.zeros((4, 9), np.int64)
    t = guide_batch(toks, "noise", RngState(2), vocab=3)
    assert t.dtype == toks.dtype and t.min() >= 0 and t.max() < 3


def _rec(vals, mask=None):
    return ActivationRecord([f"t{i}" for i in range(len(vals))], [Tensor(v) for v in vals], mask)


def test_guided_loss_worked_example():
    R = np.array([[1.0, 0], [0, 1], [0, 0]])
    Y = np.array([[1.0], [2], [3]])
    br = guided_loss(Tensor(np.array(2.0)), _rec([R]), _rec([Y]), compute_layer_mapping(1, 1))
    assert float(br.total.data) == pytest.approx(2.0 + 1 - 3 / (2 * math.sqrt(10)), abs=1e-6)
    assert float(br.total.data) == pytest.approx(2.52566, abs=1e-5)


def test_guided_loss_empty_and_identity():
    tl = Tensor(np.array(1.25))
    br = guided_loss(tl, None, None, LayerMapping.empty())
    assert br.total is tl and float(br.dissimilarity_total.data) == 0
    r = np.random.default_rng(0)
    vals = [r.standard_normal((6, 4)), r.standard_normal((6, 3))]
    br = guided_loss(tl, _rec(vals), _rec(vals), compute_layer_mapping(2, 2))
    assert float(br.dissimilarity_total.data) == pytest.approx(0, abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 5))
def test_guided_loss_breakdown_invariants(seed, t, l):
    if l > t:
        t, l = l, t
    r = np.random.default_rng(seed)
    trec = _rec([r.standard_normal((6, 3)) for _ in range(t)])
    grec = _rec([r.standard_normal((6, 2)) for _ in range(l)])
    br = guided_loss(Tensor(np.array(0.7)), trec, grec, compute_layer_mapping(t, l), "cka")
    per = [float(v.data) for _, v in br.per_layer]
    assert all(-1e-6 <= v <= 1 + 1e-6 for v in per)
    assert float(br.dissimilarity_total.data) == pytest.approx(sum(per), abs=1e-6)
    assert float(br.total.data) == pytest.approx(0.7 + sum(per), abs=1e-6)


def test_guided_loss_errors():
    r = np.random.default_rng(0)
    m = compute_layer_mapping(1, 1)
    with pytest.raises(DegenerateBatchError):
        guided_loss(Tensor(np.array(0.0)), _rec([r.standard_normal((2, 3))]), _rec([r.standard_normal((2, 3))]), m)
    with pytest.raises(ValueError):
        guided_loss(Tensor(np.array(0.0)), _rec([r.standard_normal((4, 3))]), _rec([r.standard_normal((5, 3))]), m)
    with pytest.raises(MappingError):
        guided_loss(Tensor(np.array(0.0)), _rec([r.standard_normal((4, 3))] * 2), _rec([r.standard_normal((4, 3))]), m)


def test_no_gradient_reaches_guide():
    spec = NetworkSpec("fcn", 2, 8, 3, input_dim=5)
    target, guide = build_network(spec, RngState(0)), build_network(spec, RngState(1))
    guide.mode = "frozen"
    x = np.random.default_rng(0).standard_normal((8, 5)).astype(np.float32)
    out, trec = forward_with_taps(target, x)
    with no_grad():
        _, grec = forward_with_taps(guide, x)
    br = guided_loss(F.softmax_cross_entropy(out, np.zeros(8, np.int64)), trec, grec, compute_layer_mapping(3, 3))
    backward(br.total)
    assert all(p.grad is None or not p.grad.any() for p in guide.params.values())
    assert any(p.grad is not None and p.grad.any() for p in target.params.values())
    # even without no_grad, the guide side enters as a constant
    out, trec = forward_with_taps(target, x)
    _, grec = forward_with_taps(guide, x)
    backward(guided_loss(F.sum(out) * 0.0, trec, grec, compute_layer_mapping(3, 3)).total)
    assert all(p.grad is None or not p.grad.any() for p in guide.params.values())


def test_rsa_metric_path():
    r = np.random.default_rng(0)
    br = guided_loss(Tensor(np.array(0.0)), _rec([r.standard_normal((6, 3))]), _rec([r.standard_normal((6, 3))]),
                     compute_layer_mapping(1, 1), metric="rsa")
    assert 0 <= float(br.total.data) <= 2
