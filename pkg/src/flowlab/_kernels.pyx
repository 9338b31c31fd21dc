# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels in ``_fallback``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, M_PI

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, int k, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1
    cdef Py_ssize_t ncol = C * k * k
    out_arr = np.zeros((B * Ho * Wo, ncol), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, c, di, dj, r, col, si, sj
    with nogil:
        for b in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    r = (b * Ho + i) * Wo + j
                    col = 0
                    for c in range(C):
                        for di in range(k):
                            si = i + di - pad
                            for dj in range(k):
                                sj = j + dj - pad
                                if 0 <= si < H and 0 <= sj < W:
                                    out[r, col] = x[b, c, si, sj]
                                col += 1
    return out_arr


def col2im(cols, shape, int k, int pad):
    cdef Py_ssize_t B = shape[0], C = shape[1], H = shape[2], W = shape[3]
    cdef Py_ssize_t Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1
    cdef const double[:, ::1] cv = np.ascontiguousarray(cols, dtype=np.float64).reshape(B * Ho * Wo, C * k * k)
    out_arr = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, c, di, dj, r, col, si, sj
    with nogil:
        for b in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    r = (b * Ho + i) * Wo + j
                    col = 0
                    for c in range(C):
                        for di in range(k):
                            si = i + di - pad
                            for dj in range(k):
                                sj = j + dj - pad
                                if 0 <= si < H and 0 <= sj < W:
                                    out[b, c, si, sj] += cv[r, col]
                                col += 1
    return out_arr


def rbf_pair_sums(const double[:, ::1] x, const double[:, ::1] y, bandwidths, bint exclude_diagonal):
    cdef Py_ssize_t n = x.shape[0], m = y.shape[0], d = x.shape[1]
    cdef double[::1] g = np.array([1.0 / (2.0 * s * s) for s in bandwidths], dtype=np.float64)
    cdef Py_ssize_t nb = g.shape[0]
    cdef Py_ssize_t i, j, q, b
    cdef double dist, diff, row, total = 0.0
    with nogil:
        for i in range(n):
            row = 0.0
            for j in range(m):
                if exclude_diagonal and i == j:
                    continue
                dist = 0.0
                for q in range(d):
                    diff = x[i, q] - y[j, q]
                    dist = dist + diff * diff
                for b in range(nb):
                    row = row + exp(-dist * g[b])
            total = total + row
    return total


def gaussian_kde(const double[::1] values, const double[::1] grid, double bandwidth):
    cdef Py_ssize_t n = values.shape[0], m = grid.shape[0]
    out_arr = np.zeros(m, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double inv = 1.0 / bandwidth
    cdef double z, acc, cutoff = 8.0
    cdef Py_ssize_t i, k
    with nogil:
        for k in range(m):
            acc = 0.0
            for i in range(n):
                z = (grid[k] - values[i]) * inv
                # exp(-32) is below 1e-13; skipping it keeps the sum stable.
                if -cutoff < z < cutoff:
                    acc = acc + exp(-0.5 * z * z)
            out[k] = acc * inv / (sqrt(2.0 * M_PI) * n)
    return out_arr
