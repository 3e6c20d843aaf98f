# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels for Lloyd iterations: nearest-center assignment and
per-cluster accumulation. Mirrors caft._kernels_py."""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY


def assign_labels(double[:, ::1] points, double[:, ::1] centers):
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t d = points.shape[1]
    cdef Py_ssize_t k = centers.shape[0]
    labels_arr = np.empty(n, dtype=np.int64)
    sqdist_arr = np.empty(n, dtype=np.float64)
    cdef long long[::1] labels = labels_arr
    cdef double[::1] sqdist = sqdist_arr
    cdef Py_ssize_t i, j, q, best_q
    cdef double best, acc, diff
    for i in range(n):
        best = INFINITY
        best_q = 0
        for q in range(k):
            acc = 0.0
            for j in range(d):
                diff = points[i, j] - centers[q, j]
                acc += diff * diff
                if acc >= best:
                    break
            if acc < best:
                best = acc
                best_q = q
        labels[i] = best_q
        sqdist[i] = best
    return labels_arr, sqdist_arr


def accumulate_centers(double[:, ::1] points, long long[::1] labels, Py_ssize_t k):
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t d = points.shape[1]
    sums_arr = np.zeros((k, d), dtype=np.float64)
    counts_arr = np.zeros(k, dtype=np.int64)
    cdef double[:, ::1] sums = sums_arr
    cdef long long[::1] counts = counts_arr
    cdef Py_ssize_t i, j
    cdef long long q
    for i in range(n):
        q = labels[i]
        counts[q] += 1
        for j in range(d):
            sums[q, j] += points[i, j]
    return sums_arr, counts_arr
