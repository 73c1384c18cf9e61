# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the dense-tensor engine.

Convolutions run as C-level im2col packing plus one BLAS GEMM per pass;
pooling is a direct loop.  All kernels take contiguous float64 NCHW
buffers.  The pure-numpy equivalents live in snbench.backend; the two
implementations are interchangeable and cross-checked by the test suite
and by benchmarks/bench_backends.py.
"""

import numpy as np

cimport numpy as cnp
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef void _gemm_rm(bint ta, bint tb, int m, int n, int k,
                   double* a, int lda, double* b, int ldb,
                   double* c, int ldc, double alpha, double beta) noexcept nogil:
    """C(m,n) = alpha * op(A) @ op(B) + beta * C for row-major buffers.

    ld* are the row lengths of the stored (untransposed) buffers.
    """
    cdef char fa = b'T' if ta else b'N'
    cdef char fb = b'T' if tb else b'N'
    dgemm(&fb, &fa, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)


cdef void _pack_cols(double[:, :, :, ::1] x, double[:, ::1] cols,
                     Py_ssize_t K, int stride, int pad,
                     Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    """cols[(ci*K+ky)*K+kx, (b*ho+oy)*wo+ox] = x[b, ci, oy*s+ky-pad, ox*s+kx-pad]."""
    cdef Py_ssize_t B = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t ci, ky, kx, b, oy, ox, iy, ix, row, col0
    cdef Py_ssize_t hw = H * W
    if K == 1 and stride == 1 and pad == 0:
        for ci in range(Ci):
            for b in range(B):
                memcpy(&cols[ci, b * hw], &x[b, ci, 0, 0], hw * sizeof(double))
        return
    for ci in range(Ci):
        for ky in range(K):
            for kx in range(K):
                row = (ci * K + ky) * K + kx
                for b in range(B):
                    for oy in range(ho):
                        iy = oy * stride + ky - pad
                        col0 = (b * ho + oy) * wo
                        if iy < 0 or iy >= H:
                            continue
                        for ox in range(wo):
                            ix = ox * stride + kx - pad
                            if ix < 0 or ix >= W:
                                continue
                            cols[row, col0 + ox] = x[b, ci, iy, ix]


def conv2d_fwd(double[:, :, :, ::1] x, double[:, :, :, ::1] w, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Co = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t ho = (H + 2 * pad - K) // stride + 1
    cdef Py_ssize_t wo = (W + 2 * pad - K) // stride + 1
    cdef Py_ssize_t ckk = Ci * K * K, cols_n = B * ho * wo
    cols_arr = np.zeros((ckk, cols_n), dtype=np.float64)
    yf_arr = np.empty((Co, cols_n), dtype=np.float64)
    out_arr = np.empty((B, Co, ho, wo), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef double[:, ::1] yf = yf_arr
    cdef double[:, :, :, ::1] y = out_arr
    cdef Py_ssize_t b, co, hw = ho * wo
    with nogil:
        _pack_cols(x, cols, K, stride, pad, ho, wo)
        _gemm_rm(False, False, <int>Co, <int>cols_n, <int>ckk,
                 &w[0, 0, 0, 0], <int>ckk, &cols[0, 0], <int>cols_n,
                 &yf[0, 0], <int>cols_n, 1.0, 0.0)
        for b in range(B):
            for co in range(Co):
                memcpy(&y[b, co, 0, 0], &yf[co, b * hw], hw * sizeof(double))
    return out_arr


def conv2d_bwd_input(double[:, :, :, ::1] gy, double[:, :, :, ::1] w,
                     int stride, int pad, Py_ssize_t H, Py_ssize_t W):
    cdef Py_ssize_t B = gy.shape[0], Co = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t Ci = w.shape[1], K = w.shape[2]
    cdef Py_ssize_t ckk = Ci * K * K, cols_n = B * ho * wo, hw = ho * wo
    gyf_arr = np.empty((Co, cols_n), dtype=np.float64)
    gcols_arr = np.empty((ckk, cols_n), dtype=np.float64)
    out_arr = np.zeros((B, Ci, H, W), dtype=np.float64)
    cdef double[:, ::1] gyf = gyf_arr
    cdef double[:, ::1] gcols = gcols_arr
    cdef double[:, :, :, ::1] gx = out_arr
    cdef Py_ssize_t b, co, ci, ky, kx, oy, ox, iy, ix, row
    with nogil:
        for b in range(B):
            for co in range(Co):
                memcpy(&gyf[co, b * hw], &gy[b, co, 0, 0], hw * sizeof(double))
        _gemm_rm(True, False, <int>ckk, <int>cols_n, <int>Co,
                 &w[0, 0, 0, 0], <int>ckk, &gyf[0, 0], <int>cols_n,
                 &gcols[0, 0], <int>cols_n, 1.0, 0.0)
        if K == 1 and stride == 1 and pad == 0:
            for ci in range(Ci):
                for b in range(B):
                    memcpy(&gx[b, ci, 0, 0], &gcols[ci, b * hw], hw * sizeof(double))
        else:
            for ci in range(Ci):
                for ky in range(K):
                    for kx in range(K):
                        row = (ci * K + ky) * K + kx
                        for b in range(B):
                            for oy in range(ho):
                                iy = oy * stride + ky - pad
                                if iy < 0 or iy >= H:
                                    continue
                                for ox in range(wo):
                                    ix = ox * stride + kx - pad
                                    if ix < 0 or ix >= W:
                                        continue
                                    gx[b, ci, iy, ix] += gcols[row, (b * ho + oy) * wo + ox]
    return out_arr


def conv2d_bwd_weight(double[:, :, :, ::1] x, double[:, :, :, ::1] gy,
                      Py_ssize_t K, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Co = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t ckk = Ci * K * K, cols_n = B * ho * wo, hw = ho * wo
    cols_arr = np.zeros((ckk, cols_n), dtype=np.float64)
    gyf_arr = np.empty((Co, cols_n), dtype=np.float64)
    out_arr = np.empty((Co, Ci, K, K), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef double[:, ::1] gyf = gyf_arr
    cdef double[:, :, :, ::1] gw = out_arr
    cdef Py_ssize_t b, co
    with nogil:
        _pack_cols(x, cols, K, stride, pad, ho, wo)
        for b in range(B):
            for co in range(Co):
                memcpy(&gyf[co, b * hw], &gy[b, co, 0, 0], hw * sizeof(double))
        _gemm_rm(False, True, <int>Co, <int>ckk, <int>cols_n,
                 &gyf[0, 0], <int>cols_n, &cols[0, 0], <int>cols_n,
                 &gw[0, 0, 0, 0], <int>ckk, 1.0, 0.0)
    return out_arr


def avgpool3x3_fwd(double[:, :, :, ::1] x):
    """3x3 average pool, stride 1, padding 1, divisor fixed at 9."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    out_arr = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out_arr
    cdef Py_ssize_t b, c, oy, ox, ky, kx, iy, ix
    cdef double acc
    with nogil:
        for b in range(B):
            for c in range(C):
                for oy in range(H):
                    for ox in range(W):
                        acc = 0.0
                        for ky in range(3):
                            iy = oy + ky - 1
                            if iy < 0 or iy >= H:
                                continue
                            for kx in range(3):
                                ix = ox + kx - 1
                                if ix < 0 or ix >= W:
                                    continue
                                acc += x[b, c, iy, ix]
                        y[b, c, oy, ox] = acc / 9.0
    return out_arr


def avgpool3x3_bwd(double[:, :, :, ::1] gy):
    cdef Py_ssize_t B = gy.shape[0], C = gy.shape[1], H = gy.shape[2], W = gy.shape[3]
    out_arr = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = out_arr
    cdef Py_ssize_t b, c, oy, ox, ky, kx, iy, ix
    cdef double g
    with nogil:
        for b in range(B):
            for c in range(C):
                for oy in range(H):
                    for ox in range(W):
                        g = gy[b, c, oy, ox] / 9.0
                        for ky in range(3):
                            iy = oy + ky - 1
                            if iy < 0 or iy >= H:
                                continue
                            for kx in range(3):
                                ix = ox + kx - 1
                                if ix < 0 or ix >= W:
                                    continue
                                gx[b, c, iy, ix] += g
    return out_arr


