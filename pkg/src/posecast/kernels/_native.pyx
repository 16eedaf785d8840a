# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: BLAS-backed matmul, fused dense layer, leaky ReLU, Adam.

Semantics mirror kernels._python exactly; that module is the reference.
All arrays are float32 and C-contiguous.
"""

import numpy as np

from libc.math cimport isfinite, pow, sqrtf
from scipy.linalg.cython_blas cimport sgemm

NAME = "native"


cdef void _gemm_rowmajor(float[:, ::1] a, float[:, ::1] b, float[:, ::1] c,
                         bint ta, bint tb, float alpha, float beta) noexcept nogil:
    # Row-major C[M,N] = alpha * op(a) @ op(b) + beta * C via column-major BLAS:
    # C^T = op(b)^T @ op(a)^T, with each row-major array read as its own
    # transpose in column-major storage.
    cdef int a0 = a.shape[0], a1 = a.shape[1]
    cdef int b0 = b.shape[0], b1 = b.shape[1]
    cdef int M = a1 if ta else a0
    cdef int K = a0 if ta else a1
    cdef int N = b0 if tb else b1
    cdef char transa = c'T' if tb else c'N'
    cdef char transb = c'T' if ta else c'N'
    cdef int m = N, n = M, k = K
    cdef int lda = b1, ldb = a1, ldc = N
    if M == 0 or N == 0:
        return
    sgemm(&transa, &transb, &m, &n, &k, &alpha,
          &b[0, 0], &lda, &a[0, 0], &ldb, &beta, &c[0, 0], &ldc)


def matmul(float[:, ::1] a, float[:, ::1] b, bint ta=False, bint tb=False):
    """2-D matrix product with optional transposes, out = op(a) @ op(b)."""
    cdef int M = a.shape[1] if ta else a.shape[0]
    cdef int K = a.shape[0] if ta else a.shape[1]
    cdef int N = b.shape[0] if tb else b.shape[1]
    out = np.zeros((M, N), dtype=np.float32)
    cdef float[:, ::1] c = out
    if K > 0:
        _gemm_rowmajor(a, b, c, ta, tb, 1.0, 0.0)
    return out


def linear_forward(float[:, ::1] x, float[:, ::1] w, float[::1] b):
    """Dense layer forward, out = x @ w.T + b with w shaped [out, in]."""
    cdef int B = x.shape[0], O = w.shape[0]
    cdef Py_ssize_t i, j
    out = np.empty((B, O), dtype=np.float32)
    cdef float[:, ::1] y = out
    with nogil:
        for i in range(B):
            for j in range(O):
                y[i, j] = b[j]
        _gemm_rowmajor(x, w, y, False, True, 1.0, 1.0)
    return out


def leaky_relu(x, double slope):
    cdef float[::1] xf = x.reshape(-1)
    out = np.empty(x.shape, dtype=np.float32)
    cdef float[::1] yf = out.reshape(-1)
    cdef float s = <float> slope
    cdef Py_ssize_t i, n = xf.shape[0]
    with nogil:
        for i in range(n):
            yf[i] = xf[i] if xf[i] > 0 else xf[i] * s
    return out


def leaky_relu_grad(g, x, double slope):
    """Elementwise g * (x > 0 ? 1 : slope); x decides the branch."""
    cdef float[::1] gf = g.reshape(-1)
    cdef float[::1] xf = x.reshape(-1)
    out = np.empty(g.shape, dtype=np.float32)
    cdef float[::1] yf = out.reshape(-1)
    cdef float s = <float> slope
    cdef Py_ssize_t i, n = gf.shape[0]
    with nogil:
        for i in range(n):
            yf[i] = gf[i] if xf[i] > 0 else gf[i] * s
    return out


def adam_update(float[::1] p, float[::1] g, float[::1] m, float[::1] v,
                double lr, double beta1, double beta2, double eps,
                double weight_decay, long t):
    """Bias-corrected Adam step with classic L2-coupled weight decay.

    Mutates p, m, v in place. Returns 0 on success and 1 if the gradient
    (including the decay term) contains a non-finite entry, in which case
    nothing is modified.
    """
    cdef Py_ssize_t i, n = p.shape[0]
    cdef float lrf = <float> lr
    cdef float b1 = <float> beta1
    cdef float b2 = <float> beta2
    cdef float epsf = <float> eps
    cdef float wd = <float> weight_decay
    cdef float c1 = <float> (1.0 - pow(beta1, t))
    cdef float c2 = <float> (1.0 - pow(beta2, t))
    cdef float gd, mhat, vhat
    cdef int bad = 0
    with nogil:
        for i in range(n):
            gd = g[i] + wd * p[i] if wd != 0 else g[i]
            if not isfinite(gd):
                bad = 1
                break
        if not bad:
            for i in range(n):
                gd = g[i] + wd * p[i] if wd != 0 else g[i]
                m[i] = b1 * m[i] + (1.0 - b1) * gd
                v[i] = b2 * v[i] + (1.0 - b2) * gd * gd
                mhat = m[i] / c1
                vhat = v[i] / c2
                p[i] = p[i] - lrf * mhat / (sqrtf(vhat) + epsf)
    return bad
