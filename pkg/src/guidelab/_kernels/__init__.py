"""Hot kernels: compiled when the extension is built, numpy otherwise.

Set ``GUIDELAB_PURE_PYTHON=1`` before import to force the numpy path.
"""
import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback
if os.environ.get("GUIDELAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ext as _impl  # type: ignore[no-redef]
        BACKEND = "compiled"
    except ImportError:
        _impl = _fallback


def _c(a):
    return np.ascontiguousarray(a)


def im2col(xp, kh, kw, stride):
    return _impl.im2col(_c(xp), int(kh), int(kw), int(stride))


def col2im(cols, xp_shape, kh, kw, stride):
    return _impl.col2im(_c(cols), tuple(int(s) for s in xp_shape), int(kh), int(kw), int(stride))


def elman_forward(pre, w_hh, h0):
    dt = pre.dtype
    return _impl.elman_forward(_c(pre), _c(w_hh.astype(dt, copy=False)), _c(h0.astype(dt, copy=False)))


def elman_backward(hs, ghs, w_hh, h0):
    dt = hs.dtype
    return _impl.elman_backward(_c(hs), _c(ghs.astype(dt, copy=False)),
                                _c(w_hh.astype(dt, copy=False)), _c(h0.astype(dt, copy=False)))
