# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels in ``_fallback``.

All arrays are C-contiguous row-major. BLAS is column-major, so a row-major
product C = A @ B is issued as C^T = B^T @ A^T.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from scipy.linalg.cython_blas cimport sgemm, dgemm

cnp.import_array()


cdef inline void _gemm(char ta, char tb, int m, int n, int k, floating alpha,
                       floating* a, int lda, floating* b, int ldb,
                       floating beta, floating* c, int ldc) noexcept nogil:
    if floating is float:
        sgemm(&ta, &tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)
    else:
        dgemm(&ta, &tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


def elman_forward(floating[:, :, ::1] pre, floating[:, ::1] w_hh, floating[:, ::1] h0):
    cdef Py_ssize_t T = pre.shape[0], B = pre.shape[1], H = pre.shape[2]
    hs_arr = np.array(pre, copy=True)
    cdef floating[:, :, ::1] hs = hs_arr
    cdef Py_ssize_t t
    cdef floating* hprev
    for t in range(T):
        hprev = &h0[0, 0] if t == 0 else &hs[t - 1, 0, 0]
        # hs[t] += hprev @ w_hh^T
        with nogil:
            _gemm(c'T', c'N', <int>H, <int>B, <int>H, <floating>1.0,
                  &w_hh[0, 0], <int>H, hprev, <int>H, <floating>1.0, &hs[t, 0, 0], <int>H)
        # numpy's vectorised tanh is far faster than a scalar libm loop
        np.tanh(hs_arr[t], out=hs_arr[t])
    return hs_arr


def elman_backward(floating[:, :, ::1] hs, floating[:, :, ::1] ghs,
                   floating[:, ::1] w_hh, floating[:, ::1] h0):
    cdef Py_ssize_t T = hs.shape[0], B = hs.shape[1], H = hs.shape[2]
    dtype = np.float32 if floating is float else np.float64
    gpre_arr = np.empty((T, B, H), dtype=dtype)
    gw_arr = np.zeros((H, H), dtype=dtype)
    carry_arr = np.zeros((B, H), dtype=dtype)
    cdef floating[:, :, ::1] gpre = gpre_arr
    cdef floating[:, ::1] gw = gw_arr
    cdef floating[:, ::1] carry = carry_arr
    cdef Py_ssize_t t, i, j
    cdef floating h
    cdef floating* hprev
    with nogil:
        for t in range(T - 1, -1, -1):
            for i in range(B):
                for j in range(H):
                    h = hs[t, i, j]
                    gpre[t, i, j] = (ghs[t, i, j] + carry[i, j]) * (1 - h * h)
            hprev = &h0[0, 0] if t == 0 else &hs[t - 1, 0, 0]
            # gw += gz^T @ hprev
            _gemm(c'N', c'T', <int>H, <int>H, <int>B, <floating>1.0,
                  hprev, <int>H, &gpre[t, 0, 0], <int>H, <floating>1.0, &gw[0, 0], <int>H)
            # carry = gz @ w_hh
            _gemm(c'N', c'N', <int>H, <int>B, <int>H, <floating>1.0,
                  &w_hh[0, 0], <int>H, &gpre[t, 0, 0], <int>H, <floating>0.0, &carry[0, 0], <int>H)
    return gpre_arr, gw_arr, carry_arr


def im2col(floating[:, :, :, ::1] xp, int kh, int kw, int stride):
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1], Hp = xp.shape[2], Wp = xp.shape[3]
    cdef Py_ssize_t OH = (Hp - kh) // stride + 1, OW = (Wp - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((B, OH, OW, C, kh, kw), dtype=dtype)
    cdef floating[:, :, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, oy, ox, c, i, j
    with nogil:
        for b in range(B):
            for oy in range(OH):
                for ox in range(OW):
                    for c in range(C):
                        for i in range(kh):
                            for j in range(kw):
                                out[b, oy, ox, c, i, j] = xp[b, c, oy * stride + i, ox * stride + j]
    return out_arr


def col2im(floating[:, :, :, :, :, ::1] cols, tuple xp_shape, int kh, int kw, int stride):
    cdef Py_ssize_t B = cols.shape[0], OH = cols.shape[1], OW = cols.shape[2], C = cols.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros(xp_shape, dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, oy, ox, c, i, j
    with nogil:
        for b in range(B):
            for oy in range(OH):
                for ox in range(OW):
                    for c in range(C):
                        for i in range(kh):
                            for j in range(kw):
                                out[b, c, oy * stride + i, ox * stride + j] += cols[b, oy, ox, c, i, j]
    return out_arr
