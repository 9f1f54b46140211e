# cython: language_level=3
"""Compiled aggregation kernels.

Edge order is preserved when accumulating, so results match the numpy
fallback in :mod:`amp.kernels` bit for bit.
"""
import numpy as np
cimport numpy as cnp
cimport cython

cnp.import_array()


@cython.boundscheck(False)
@cython.wraparound(False)
def scatter_add(const double[:, ::1] values, const cnp.int64_t[::1] index, Py_ssize_t n):
    """Sum rows of ``values`` into ``n`` output rows selected by ``index``."""
    cdef Py_ssize_t m = values.shape[0]
    cdef Py_ssize_t d = values.shape[1]
    cdef Py_ssize_t e, j, row
    out = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for e in range(m):
            row = index[e]
            for j in range(d):
                o[row, j] += values[e, j]
    return out


@cython.boundscheck(False)
@cython.wraparound(False)
def scatter_add_1d(const double[::1] values, const cnp.int64_t[::1] index, Py_ssize_t n):
    cdef Py_ssize_t m = values.shape[0]
    cdef Py_ssize_t e
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for e in range(m):
            o[index[e]] += values[e]
    return out


@cython.boundscheck(False)
@cython.wraparound(False)
def gather_rows(const double[:, ::1] values, const cnp.int64_t[::1] index):
    cdef Py_ssize_t m = index.shape[0]
    cdef Py_ssize_t d = values.shape[1]
    cdef Py_ssize_t e, j, row
    out = np.empty((m, d), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for e in range(m):
            row = index[e]
            for j in range(d):
                o[e, j] = values[row, j]
    return out


@cython.boundscheck(False)
@cython.wraparound(False)
def propagate(const double[:, ::1] values, const cnp.int64_t[::1] src, const cnp.int64_t[::1] dst,
              const double[::1] weights, Py_ssize_t n):
    """``out[dst[e]] += weights[e] * values[src[e]]`` in edge order."""
    cdef Py_ssize_t m = src.shape[0]
    cdef Py_ssize_t d = values.shape[1]
    cdef Py_ssize_t e, j, s, t
    cdef double w
    out = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for e in range(m):
            s = src[e]
            t = dst[e]
            w = weights[e]
            for j in range(d):
                o[t, j] += w * values[s, j]
    return out


@cython.boundscheck(False)
@cython.wraparound(False)
def propagate_unweighted(const double[:, ::1] values, const cnp.int64_t[::1] src,
                         const cnp.int64_t[::1] dst, Py_ssize_t n):
    cdef Py_ssize_t m = src.shape[0]
    cdef Py_ssize_t d = values.shape[1]
    cdef Py_ssize_t e, j, s, t
    out = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for e in range(m):
            s = src[e]
            t = dst[e]
            for j in range(d):
                o[t, j] += values[s, j]
    return out
