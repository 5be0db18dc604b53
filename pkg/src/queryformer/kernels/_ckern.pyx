# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel backend: BLAS-backed gemm plus tight C loops for the
row-wise kernels.  Mirrors the surface of ``pyback``; arrays must be
float64 and C-contiguous."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt, sin, cos
from scipy.linalg.cython_blas cimport dgemm

NAME = "compiled"


cdef void _dgemm_rowmajor(double[:, ::1] a, double[:, ::1] b, double[:, ::1] c,
                          bint ta, bint tb, double alpha, double beta) noexcept nogil:
    # Row-major product via the classic swap: C_row = opA(a) @ opB(b) is
    # computed as the column-major product opB(b)^T' opA(a)^T'.
    cdef int m, n, k
    cdef int lda, ldb, ldc
    cdef char fa, fb
    if ta:
        m = a.shape[1]; k = a.shape[0]
    else:
        m = a.shape[0]; k = a.shape[1]
    if tb:
        n = b.shape[0]
    else:
        n = b.shape[1]
    lda = a.shape[1]
    ldb = b.shape[1]
    ldc = n
    fa = b'T' if tb else b'N'
    fb = b'T' if ta else b'N'
    if m == 0 or n == 0:
        return
    if k == 0:
        if beta == 0.0:
            c[:, :] = 0.0
        return
    dgemm(&fa, &fb, &n, &m, &k, &alpha,
          &b[0, 0], &ldb, &a[0, 0], &lda, &beta, &c[0, 0], &ldc)


def gemm(cnp.ndarray a, cnp.ndarray b, bint ta=False, bint tb=False):
    cdef int m = a.shape[1] if ta else a.shape[0]
    cdef int n = b.shape[0] if tb else b.shape[1]
    out = np.empty((m, n), dtype=np.float64)
    _dgemm_rowmajor(a, b, out, ta, tb, 1.0, 0.0)
    return out


def gemm_acc(cnp.ndarray c, cnp.ndarray a, cnp.ndarray b, bint ta=False, bint tb=False):
    _dgemm_rowmajor(a, b, c, ta, tb, 1.0, 1.0)


def softmax_fwd(double[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] y = out_arr
    cdef Py_ssize_t i, j
    cdef double mx, s
    with nogil:
        for i in range(m):
            mx = x[i, 0]
            for j in range(1, n):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(n):
                y[i, j] = exp(x[i, j] - mx)
                s += y[i, j]
            for j in range(n):
                y[i, j] /= s
    return out_arr


def softmax_bwd_acc(double[:, ::1] gx, double[:, ::1] y, double[:, ::1] gy):
    cdef Py_ssize_t m = y.shape[0], n = y.shape[1]
    cdef Py_ssize_t i, j
    cdef double inner
    with nogil:
        for i in range(m):
            inner = 0.0
            for j in range(n):
                inner += gy[i, j] * y[i, j]
            for j in range(n):
                gx[i, j] += y[i, j] * (gy[i, j] - inner)


def layernorm_fwd(double[:, ::1] x, double[::1] gain, double[::1] shift, double eps):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    y_arr = np.empty((m, n), dtype=np.float64)
    xhat_arr = np.empty((m, n), dtype=np.float64)
    rstd_arr = np.empty((m, 1), dtype=np.float64)
    cdef double[:, ::1] y = y_arr, xhat = xhat_arr, rstd = rstd_arr
    cdef Py_ssize_t i, j
    cdef double mean, var, d, r
    with nogil:
        for i in range(m):
            mean = 0.0
            for j in range(n):
                mean += x[i, j]
            mean /= n
            var = 0.0
            for j in range(n):
                d = x[i, j] - mean
                var += d * d
            var /= n
            r = 1.0 / sqrt(var + eps)
            rstd[i, 0] = r
            for j in range(n):
                xhat[i, j] = (x[i, j] - mean) * r
                y[i, j] = xhat[i, j] * gain[j] + shift[j]
    return y_arr, xhat_arr, rstd_arr


def layernorm_bwd_acc(double[:, ::1] gx, double[::1] ggain, double[::1] gshift,
                      double[:, ::1] gy, double[:, ::1] xhat, double[:, ::1] rstd,
                      double[::1] gain):
    cdef Py_ssize_t m = xhat.shape[0], n = xhat.shape[1]
    cdef Py_ssize_t i, j
    cdef double mean_dxhat, mean_proj, dx
    with nogil:
        for i in range(m):
            mean_dxhat = 0.0
            mean_proj = 0.0
            for j in range(n):
                dx = gy[i, j] * gain[j]
                mean_dxhat += dx
                mean_proj += dx * xhat[i, j]
                ggain[j] += gy[i, j] * xhat[i, j]
                gshift[j] += gy[i, j]
            mean_dxhat /= n
            mean_proj /= n
            for j in range(n):
                dx = gy[i, j] * gain[j]
                gx[i, j] += rstd[i, 0] * (dx - mean_dxhat - xhat[i, j] * mean_proj)


def sigmoid_fwd(double[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] y = out_arr
    cdef Py_ssize_t i, j
    cdef double e
    with nogil:
        for i in range(m):
            for j in range(n):
                if x[i, j] >= 0.0:
                    y[i, j] = 1.0 / (1.0 + exp(-x[i, j]))
                else:
                    e = exp(x[i, j])
                    y[i, j] = e / (1.0 + e)
    return out_arr


def sigmoid_bwd_acc(double[:, ::1] gx, double[:, ::1] gy, double[:, ::1] y):
    cdef Py_ssize_t m = y.shape[0], n = y.shape[1]
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(m):
            for j in range(n):
                gx[i, j] += gy[i, j] * y[i, j] * (1.0 - y[i, j])


def relu_fwd(double[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] y = out_arr
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(m):
            for j in range(n):
                y[i, j] = x[i, j] if x[i, j] > 0.0 else 0.0
    return out_arr


def relu_bwd_acc(double[:, ::1] gx, double[:, ::1] gy, double[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(m):
            for j in range(n):
                if x[i, j] > 0.0:
                    gx[i, j] += gy[i, j]


def acc_mul(double[:, ::1] out, double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(m):
            for j in range(n):
                out[i, j] += a[i, j] * b[i, j]


def box_sincos_fwd(double[:, ::1] boxes, double[::1] inv_freq):
    cdef Py_ssize_t n = boxes.shape[0], pairs = inv_freq.shape[0]
    cdef Py_ssize_t seg = 2 * pairs
    out_arr = np.empty((n, 4 * seg), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, c, j
    cdef double ang
    with nogil:
        for i in range(n):
            for c in range(4):
                for j in range(pairs):
                    ang = boxes[i, c] * inv_freq[j]
                    out[i, c * seg + 2 * j] = sin(ang)
                    out[i, c * seg + 2 * j + 1] = cos(ang)
    return out_arr


def box_sincos_bwd_acc(double[:, ::1] gboxes, double[:, ::1] gout,
                       double[:, ::1] out, double[::1] inv_freq):
    cdef Py_ssize_t n = gboxes.shape[0], pairs = inv_freq.shape[0]
    cdef Py_ssize_t seg = 2 * pairs
    cdef Py_ssize_t i, c, j
    cdef double acc
    with nogil:
        for i in range(n):
            for c in range(4):
                acc = 0.0
                for j in range(pairs):
                    acc += inv_freq[j] * (gout[i, c * seg + 2 * j] * out[i, c * seg + 2 * j + 1]
                                          - gout[i, c * seg + 2 * j + 1] * out[i, c * seg + 2 * j])
                gboxes[i, c] += acc
