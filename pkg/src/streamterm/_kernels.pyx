# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled alignment kernels. Same contract as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef enum:
    DIAG = 0
    UP = 1
    LEFT = 2


def edit_distance(a, b):
    cdef const int[::1] av = np.ascontiguousarray(a, dtype=np.int32)
    cdef const int[::1] bv = np.ascontiguousarray(b, dtype=np.int32)
    cdef Py_ssize_t n = av.shape[0], m = bv.shape[0], i, j
    cdef int[::1] prev = np.arange(m + 1, dtype=np.int32)
    cdef int[::1] cur = np.empty(m + 1, dtype=np.int32)
    cdef int[::1] tmp
    cdef int best, up, left, ai
    for i in range(1, n + 1):
        cur[0] = <int>i
        ai = av[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1] + (0 if ai == bv[j - 1] else 1)
            up = cur[j - 1] + 1
            if up < best:
                best = up
            left = prev[j] + 1
            if left < best:
                best = left
            cur[j] = best
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[m])


def align_cuts(hyp, ref, boundaries):
    cdef const int[::1] hv = np.ascontiguousarray(hyp, dtype=np.int32)
    cdef const int[::1] rv = np.ascontiguousarray(ref, dtype=np.int32)
    cdef const long long[::1] bv = np.ascontiguousarray(boundaries, dtype=np.int64)
    cdef Py_ssize_t n = hv.shape[0], m = rv.shape[0], i, j
    cdef Py_ssize_t s = bv.shape[0] - 1
    cdef cnp.uint8_t[:, ::1] bp = np.empty((n + 1, m + 1), dtype=np.uint8)
    cdef int[::1] prev = np.arange(m + 1, dtype=np.int32)
    cdef int[::1] cur = np.empty(m + 1, dtype=np.int32)
    cdef int[::1] tmp
    cdef int best, up, left, hi
    cdef cnp.uint8_t code
    cdef long long[::1] cuts = np.zeros(bv.shape[0], dtype=np.int64)

    for j in range(m + 1):
        bp[0, j] = UP
    for i in range(1, n + 1):
        cur[0] = <int>i
        bp[i, 0] = LEFT
        hi = hv[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1] + (0 if hi == rv[j - 1] else 1)
            code = DIAG
            up = cur[j - 1] + 1
            if up < best:
                best = up
                code = UP
            left = prev[j] + 1
            if left < best:
                best = left
                code = LEFT
            cur[j] = best
            bp[i, j] = code
        tmp = prev
        prev = cur
        cur = tmp

    i = n
    j = m
    while True:
        while s >= 0 and bv[s] == j:
            cuts[s] = i
            s -= 1
        if i == 0 and j == 0:
            break
        code = bp[i, j]
        if code == DIAG:
            i -= 1
            j -= 1
        elif code == UP:
            j -= 1
        else:
            i -= 1
    return int(prev[m]), [int(c) for c in cuts]
