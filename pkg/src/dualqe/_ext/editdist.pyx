# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled word-level Levenshtein kernels over int64 token codes."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def levenshtein(const long long[::1] a, const long long[::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    cdef long long[::1] prev = np.arange(m + 1, dtype=np.int64)
    cdef long long[::1] cur = np.empty(m + 1, dtype=np.int64)
    cdef long long best, cand
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            best = prev[j - 1] + (a[i - 1] != b[j - 1])
            cand = prev[j] + 1
            if cand < best:
                best = cand
            cand = cur[j - 1] + 1
            if cand < best:
                best = cand
            cur[j] = best
        prev, cur = cur, prev
    return int(prev[m])


def distance_table(const long long[::1] a, const long long[::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    table_arr = np.empty((n + 1, m + 1), dtype=np.int64)
    cdef long long[:, ::1] d = table_arr
    cdef long long best, cand
    for j in range(m + 1):
        d[0, j] = j
    for i in range(1, n + 1):
        d[i, 0] = i
        for j in range(1, m + 1):
            best = d[i - 1, j - 1] + (a[i - 1] != b[j - 1])
            cand = d[i - 1, j] + 1
            if cand < best:
                best = cand
            cand = d[i, j - 1] + 1
            if cand < best:
                best = cand
            d[i, j] = best
    return table_arr
