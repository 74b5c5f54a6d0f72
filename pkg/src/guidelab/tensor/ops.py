"""Differentiable primitives.

Each op computes its forward value with numpy and returns a closure mapping the
upstream gradient to one gradient per parent (``None`` for non-differentiable
inputs). Gradients always come back in the exact shape of the parent.
"""
from __future__ import annotations

import numpy as np

from .. import _kernels
from .tensor import ShapeError, Tensor, as_tensor


class LabelError(ValueError):
    pass


class DegenerateError(ValueError):
    """Input is valid in shape but numerically degenerate for the op."""


def _pair(a, b):
    """Wrap operands as tensors, casting bare constants to the tensor dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from e


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return Tensor._make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None)
    return Tensor._make(ad / bd, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.dtype.type(c) if a.dtype.kind == "f" else c
    return Tensor._make(a.data * c, (a,), lambda g: (g * c,), "scale")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "power")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def gelu(a) -> Tensor:
    """tanh approximation."""
    a = as_tensor(a)
    x = a.data
    k = np.asarray(np.sqrt(2.0 / np.pi), dtype=x.dtype)
    inner = k * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1 + th)

    def bw(g):
        dinner = k * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + th) + 0.5 * x * (1 - th * th) * dinner),)
    return Tensor._make(out, (a,), bw, "gelu")


_UNARY = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}
_BINARY = {"add": add, "mul": mul}


def apply_elementwise(op: str, *args):
    """Dispatch by name: relu|tanh|sigmoid (one arg), add|mul (two), scale (tensor, float)."""
    if op in _UNARY:
        (x,) = args
        return _UNARY[op](x)
    if op in _BINARY:
        a, b = args
        return _BINARY[op](a, b)
    if op == "scale":
        a, c = args
        return scale(a, c)
    raise ValueError(f"unknown elementwise op {op!r}")


def where(mask, a, b) -> Tensor:
    """``mask ? a : b`` with a constant boolean mask."""
    a, b = _pair(a, b)
    mask = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape
    return Tensor._make(np.where(mask, a.data, b.data), (a, b),
                        lambda g: (unbroadcast(np.where(mask, g, 0), sa),
                                   unbroadcast(np.where(mask, 0, g), sb)), "where")


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    ax = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=ax, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)
    return Tensor._make(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in ax])) if ax else 1
    return scale(sum(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i, j) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    if isinstance(idx, tuple):
        idx = tuple(i.data if isinstance(i, Tensor) else i for i in idx)
    elif isinstance(idx, Tensor):
        idx = idx.data
    shape, dt = a.shape, a.dtype
    adv = _is_advanced(idx)

    def bw(g):
        out = np.zeros(shape, dtype=dt)
        if adv:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)
    return Tensor._make(np.asarray(a.data[idx]), (a,), bw, "getitem")


def concat(tensors, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))
    return Tensor._make(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def stack(tensors, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))
    return Tensor._make(np.stack([t.data for t in ts], axis=axis), ts, bw, "stack")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb
    return Tensor._make(ad @ bd, (a, b), bw, "matmul")


def linear(x, w, b=None) -> Tensor:
    """x @ w.T + b with w stored (out, in)."""
    y = matmul(x, transpose(w, (1, 0)))
    return add(y, b) if b is not None else y


# ---------------------------------------------------------------- softmax & losses

def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return Tensor._make(out, (a,), bw, "softmax")


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return Tensor._make(out, (a,), bw, "log_softmax")


def softmax_cross_entropy(logits, labels, ignore_index: int | None = None) -> Tensor:
    """Mean over non-ignored rows of -log softmax(logits)[label]. ``logits`` is (N, C)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    n, c = logits.shape
    if n < 1:
        raise ShapeError("empty batch")
    keep = np.ones(n, dtype=bool) if ignore_index is None else labels != ignore_index
    lab = labels[keep]
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise LabelError(f"labels must lie in [0, {c})")
    count = int(keep.sum())
    if count == 0:
        raise LabelError("every label is ignored")
    x = logits.data
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, lab].sum() / count

    def bw(g):
        p = np.exp(logp)
        p[rows, lab] -= 1
        p[~keep] = 0
        return (p * (g / count),)
    return Tensor._make(np.asarray(loss, dtype=x.dtype), (logits,), bw, "cross_entropy")


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits, computed stably."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=logits.dtype).reshape(logits.shape)
    x = logits.data
    loss = (np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))).mean()
    n = x.size

    def bw(g):
        s = np.where(x >= 0, 1 / (1 + np.exp(-x)), np.exp(x) / (1 + np.exp(x)))
        return ((s - y) * (g / n),)
    return Tensor._make(np.asarray(loss, dtype=x.dtype), (logits,), bw, "bce")


def mse_loss(pred, target) -> Tensor:
    pred, target = _pair(pred, target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    d = pred.data - target.data
    n = d.size

    def bw(g):
        gd = g * 2 * d / n
        return (gd if pred.requires_grad else None, -gd if target.requires_grad else None)
    return Tensor._make(np.asarray((d * d).mean(), dtype=d.dtype), (pred, target), bw, "mse")


# ---------------------------------------------------------------- layers

def embedding(weight, idx) -> Tensor:
    weight = as_tensor(weight)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise LabelError(f"token ids must lie in [0, {weight.shape[0]})")
    shape = weight.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)
    return Tensor._make(weight.data[idx], (weight,), bw, "embedding")


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B, C, H, W) input with (O, C, kh, kw) kernel, zero padded."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d expects (B,C,H,W) and (O,C,kh,kw), got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _kernels.im2col(xp, kh, kw, stride)  # (B, OH, OW, C, kh, kw)
    OH, OW = cols.shape[1], cols.shape[2]
    flat = cols.reshape(B * OH * OW, C * kh * kw)
    wmat = w.data.reshape(O, C * kh * kw)
    out = (flat @ wmat.T).reshape(B, OH, OW, O).transpose(0, 3, 1, 2)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, O, 1, 1)
    out = np.ascontiguousarray(out)
    xp_shape = xp.shape

    def bw(g):
        gt = g.transpose(0, 2, 3, 1).reshape(B * OH * OW, O)
        gw = (gt.T @ flat).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gt @ wmat).reshape(B, OH, OW, C, kh, kw)
            gxp = _kernels.col2im(dcols, xp_shape, kh, kw, stride)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw) if b is None else (gx, gw, gb)
    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, bw, "conv2d")


def avg_pool2d(x, k: int) -> Tensor:
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % k or W % k:
        raise ShapeError(f"avg_pool2d: {H}x{W} not divisible by {k}")
    out = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def bw(g):
        gg = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gg.astype(x.dtype, copy=False),)
    return Tensor._make(out, (x,), bw, "avg_pool2d")


def _norm_backward(g, xhat, inv_std, gamma, axes):
    m = int(np.prod([xhat.shape[i] for i in axes]))
    dxhat = g * gamma
    return inv_std / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                          - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))


def batch_norm(x, gamma, beta, running_mean=None, running_var=None, mode: str = "train",
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-feature normalisation over batch (and spatial) axes.

    mode ``train`` normalises with batch statistics and updates the running
    buffers in place; ``batch`` uses batch statistics and leaves the buffers
    alone (frozen untrained guides); ``eval`` uses the running buffers.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim == 2:
        axes, bshape = (0,), (1, -1)
    elif x.ndim == 4:
        axes, bshape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ShapeError(f"batch_norm expects 2-D or 4-D input, got {x.shape}")
    xd = x.data
    gm = gamma.data.reshape(bshape)
    if mode in ("train", "batch"):
        if x.shape[0] < 2:
            raise DegenerateError("batch_norm needs at least 2 samples in train mode")
        mu = xd.mean(axis=axes, keepdims=True)
        var = xd.var(axis=axes, keepdims=True)
        if mode == "train" and running_mean is not None:
            m = int(np.prod([xd.shape[i] for i in axes]))
            running_mean *= 1 - momentum
            running_mean += momentum * mu.reshape(-1)
            running_var *= 1 - momentum
            running_var += momentum * var.reshape(-1) * (m / (m - 1))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu) * inv_std
        out = xhat * gm + beta.data.reshape(bshape)

        def bw(g):
            gx = _norm_backward(g, xhat, inv_std, gm, axes) if x.requires_grad else None
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    elif mode == "eval":
        inv_std = (1.0 / np.sqrt(running_var + eps)).reshape(bshape).astype(xd.dtype)
        xhat = (xd - running_mean.reshape(bshape)) * inv_std
        out = xhat * gm + beta.data.reshape(bshape)

        def bw(g):
            return g * gm * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    return Tensor._make(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw, "batch_norm")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.shape[-1] < 2:
        raise DegenerateError("layer_norm needs a normalised axis of length >= 2")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    out = xhat * gamma.data + beta.data
    red = tuple(range(xd.ndim - 1))

    def bw(g):
        gx = _norm_backward(g, xhat, inv_std, gamma.data, (-1,)) if x.requires_grad else None
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)
    return Tensor._make(out, (x, gamma, beta), bw, "layer_norm")


def elman_scan(pre, w_hh, h0=None) -> Tensor:
    """Hidden states of h_t = tanh(pre_t + h_{t-1} W_hh^T) for batch-major ``pre`` (B, T, H)."""
    pre, w_hh = as_tensor(pre), as_tensor(w_hh)
    B, T, H = pre.shape
    if w_hh.shape != (H, H):
        raise ShapeError(f"recurrent weight {w_hh.shape} does not match hidden size {H}")
    h0t = as_tensor(h0) if h0 is not None else None
    h0d = h0t.data if h0t is not None else np.zeros((B, H), dtype=pre.dtype)
    pre_tm = np.ascontiguousarray(pre.data.transpose(1, 0, 2))
    hs_tm = _kernels.elman_forward(pre_tm, w_hh.data, h0d)

    def bw(g):
        g_tm = np.ascontiguousarray(g.transpose(1, 0, 2))
        gpre, gw, gh0 = _kernels.elman_backward(hs_tm, g_tm, w_hh.data, h0d)
        grads = (gpre.transpose(1, 0, 2), gw)
        return grads + (gh0,) if h0t is not None else grads
    parents = (pre, w_hh) if h0t is None else (pre, w_hh, h0t)
    return Tensor._make(np.ascontiguousarray(hs_tm.transpose(1, 0, 2)), parents, bw, "elman_scan")
