"""Pure numpy implementations of the hot kernels.

These are the reference path. The compiled module in ``_ext.pyx`` must agree
with them to within 1e-6 (float64) on every input.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride):
    """(B, C, Hp, Wp) padded input -> contiguous (B, OH, OW, C, kh, kw) patches."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def col2im(cols, xp_shape, kh, kw, stride):
    """Adjoint of :func:`im2col`: scatter-add patches back onto the padded grid."""
    out = np.zeros(xp_shape, dtype=cols.dtype)
    oh, ow = cols.shape[1], cols.shape[2]
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
    return out


def elman_forward(pre, w_hh, h0):
    """Run h_t = tanh(pre_t + h_{t-1} W_hh^T) over time-major ``pre`` (T, B, H)."""
    hs = np.empty_like(pre)
    h = h0
    wt = w_hh.T
    for t in range(pre.shape[0]):
        h = np.tanh(pre[t] + h @ wt)
        hs[t] = h
    return hs


def elman_backward(hs, ghs, w_hh, h0):
    """Backprop through time. Returns (grad_pre, grad_w_hh, grad_h0)."""
    gpre = np.empty_like(hs)
    gw = np.zeros_like(w_hh)
    carry = np.zeros_like(h0)
    for t in range(hs.shape[0] - 1, -1, -1):
        gz = (ghs[t] + carry) * (1.0 - hs[t] * hs[t])
        gpre[t] = gz
        hprev = hs[t - 1] if t > 0 else h0
        gw += gz.T @ hprev
        carry = gz @ w_hh
    return gpre, gw, carry
