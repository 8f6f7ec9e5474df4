# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: nearest correspondence and brute-force kNN.

Semantics match kernels.reference bit for bit: squared distances accumulate
as (dx*dx + dy*dy) + dz*dz and ties resolve to the lowest index.
"""

import numpy as np

from libc.math cimport INFINITY


def nearest_correspondence(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t m = b.shape[0]
    idx_arr = np.empty(n, dtype=np.int64)
    sqd_arr = np.empty(n, dtype=np.float64)
    cdef long long[::1] idx = idx_arr
    cdef double[::1] sqd = sqd_arr
    cdef Py_ssize_t i, j, best_j
    cdef double dx, dy, dz, d, best
    for i in range(n):
        best = INFINITY
        best_j = 0
        for j in range(m):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            dz = a[i, 2] - b[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
                best_j = j
        idx[i] = best_j
        sqd[i] = best
    return idx_arr, sqd_arr


def knn_indices(double[:, ::1] points, int k):
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t kk = min(k, n - 1) if n > 0 else 0
    out_arr = np.empty((n, kk), dtype=np.int64)
    if kk == 0:
        return out_arr
    cdef long long[:, ::1] out = out_arr
    buf_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] buf = buf_arr
    cdef Py_ssize_t i, j, t, best_j
    cdef double dx, dy, dz, best
    for i in range(n):
        for j in range(n):
            dx = points[i, 0] - points[j, 0]
            dy = points[i, 1] - points[j, 1]
            dz = points[i, 2] - points[j, 2]
            buf[j] = dx * dx + dy * dy + dz * dz
        buf[i] = INFINITY
        # Repeated strict-min scans reproduce a stable sort's tie order.
        for t in range(kk):
            best = INFINITY
            best_j = 0
            for j in range(n):
                if buf[j] < best:
                    best = buf[j]
                    best_j = j
            out[i, t] = best_j
            buf[best_j] = INFINITY
    return out_arr
