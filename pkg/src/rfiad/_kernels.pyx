# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for coreset selection and nearest-prototype lookup.

Must stay behaviourally identical to ``rfiad._fallback``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY, sqrt

cnp.import_array()


cdef inline double _sqdist(const double[:, ::1] a, Py_ssize_t i,
                           const double[:, ::1] b, Py_ssize_t j) nogil:
    cdef Py_ssize_t k
    cdef double acc = 0.0, diff
    for k in range(a.shape[1]):
        diff = a[i, k] - b[j, k]
        acc += diff * diff
    return acc


def kcenter_greedy(const double[:, ::1] points, const double[:, ::1] history,
                   Py_ssize_t n_select):
    cdef Py_ssize_t n = points.shape[0], d = points.shape[1], h = history.shape[0]
    cdef Py_ssize_t i, j, k, pick, best
    cdef double dist, acc, diff, best_val, cov
    picks_arr = np.empty(n_select, dtype=np.int64)
    cover_arr = np.empty(n_select, dtype=np.float64)
    mind_arr = np.empty(n, dtype=np.float64)
    taken_arr = np.zeros(n, dtype=np.uint8)
    cdef long long[::1] picks = picks_arr
    cdef double[::1] cover = cover_arr
    cdef double[::1] mind = mind_arr
    cdef unsigned char[::1] taken = taken_arr
    cdef double[::1] centroid

    with nogil:
        if h > 0:
            for i in range(n):
                best_val = -1.0
                for j in range(h):
                    dist = _sqdist(points, i, history, j)
                    if best_val < 0 or dist < best_val:
                        best_val = dist
                mind[i] = best_val
    if h == 0:
        centroid = np.zeros(d, dtype=np.float64)
        with nogil:
            for i in range(n):
                for k in range(d):
                    centroid[k] += points[i, k]
            for k in range(d):
                centroid[k] /= n
            for i in range(n):
                acc = 0.0
                for k in range(d):
                    diff = points[i, k] - centroid[k]
                    acc += diff * diff
                mind[i] = acc

    with nogil:
        for pick in range(n_select):
            best = -1
            best_val = -1.0
            for i in range(n):
                if not taken[i] and mind[i] > best_val:
                    best_val = mind[i]
                    best = i
            picks[pick] = best
            taken[best] = 1
            if pick == 0 and h == 0:
                for i in range(n):
                    mind[i] = _sqdist(points, i, points, best)
            else:
                for i in range(n):
                    dist = _sqdist(points, i, points, best)
                    if dist < mind[i]:
                        mind[i] = dist
            cov = 0.0
            for i in range(n):
                if mind[i] > cov:
                    cov = mind[i]
            cover[pick] = cov
    return picks_arr, cover_arr


cdef inline double _dot(const double[:, ::1] a, Py_ssize_t i,
                        const double[:, ::1] b, Py_ssize_t j) nogil:
    # four partial sums so the compiler can overlap the multiply-adds
    cdef Py_ssize_t k, d = a.shape[1], d4 = d - d % 4
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0
    for k in range(0, d4, 4):
        s0 += a[i, k] * b[j, k]
        s1 += a[i, k + 1] * b[j, k + 1]
        s2 += a[i, k + 2] * b[j, k + 2]
        s3 += a[i, k + 3] * b[j, k + 3]
    for k in range(d4, d):
        s0 += a[i, k] * b[j, k]
    return (s0 + s1) + (s2 + s3)


def max_cosine(const double[:, ::1] queries, const double[:, ::1] bank):
    cdef Py_ssize_t n = queries.shape[0], m = bank.shape[0]
    cdef Py_ssize_t i, j, arg
    cdef double dot, best
    best_arr = np.empty(n, dtype=np.float64)
    arg_arr = np.empty(n, dtype=np.int64)
    binv_arr = np.empty(m, dtype=np.float64)
    cdef double[::1] out = best_arr
    cdef long long[::1] idx = arg_arr
    cdef double[::1] binv = binv_arr
    with nogil:
        for j in range(m):
            binv[j] = 1.0 / sqrt(_dot(bank, j, bank, j))
        for i in range(n):
            best = -INFINITY
            arg = 0
            for j in range(m):
                dot = _dot(queries, i, bank, j) * binv[j]
                if dot > best:
                    best = dot
                    arg = j
            # the query norm is a positive constant per row, so it cannot move the argmax
            out[i] = best / sqrt(_dot(queries, i, queries, i))
            idx[i] = arg
    return best_arr, arg_arr
