# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: embedding-gradient scatter-add and the fused
pairwise-absolute-difference row sums used by the differentiable sort.

Each function has a pure-numpy twin in ``pyfallback.py``.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def scatter_add_rows(double[:, ::1] out, long[::1] idx, double[:, ::1] rows):
    """out[idx[i], :] += rows[i, :], accumulating over duplicate indices."""
    cdef Py_ssize_t n = idx.shape[0]
    cdef Py_ssize_t d = out.shape[1]
    cdef Py_ssize_t i, j, r
    for i in range(n):
        r = idx[i]
        for j in range(d):
            out[r, j] += rows[i, j]


def absdiff_rowsums(double[:, ::1] x):
    """Row sums of the absolute pairwise-difference matrix, without
    materializing the [B, n, n] intermediate.

    x: [B, n] -> out[b, i] = sum_j |x[b, i] - x[b, j]|
    """
    cdef Py_ssize_t b_count = x.shape[0]
    cdef Py_ssize_t n = x.shape[1]
    out_arr = np.zeros((b_count, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, i, j
    cdef double xi, acc, diff
    for b in range(b_count):
        for i in range(n):
            xi = x[b, i]
            acc = 0.0
            for j in range(n):
                diff = xi - x[b, j]
                acc += diff if diff >= 0.0 else -diff
            out[b, i] = acc
    return out_arr


def absdiff_rowsums_grad(double[:, ::1] x, double[:, ::1] g):
    """Gradient of ``absdiff_rowsums`` w.r.t. x given upstream grad g.

    grad[b, k] = sum_n sign(x[b, k] - x[b, n]) * (g[b, k] + g[b, n])
    """
    cdef Py_ssize_t b_count = x.shape[0]
    cdef Py_ssize_t n = x.shape[1]
    grad_arr = np.zeros((b_count, n), dtype=np.float64)
    cdef double[:, ::1] grad = grad_arr
    cdef Py_ssize_t b, k, j
    cdef double xk, gk, acc, diff
    for b in range(b_count):
        for k in range(n):
            xk = x[b, k]
            gk = g[b, k]
            acc = 0.0
            for j in range(n):
                diff = xk - x[b, j]
                if diff > 0.0:
                    acc += gk + g[b, j]
                elif diff < 0.0:
                    acc -= gk + g[b, j]
            grad[b, k] = acc
    return grad_arr
