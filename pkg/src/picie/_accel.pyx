# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loop of the mini-batch k-means update.

Fuses the per-row argmax over precomputed similarities with the scatter
accumulation of per-cluster sums and counts (the part that is slow in
numpy, where it needs np.add.at).
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def assign_accumulate(double[:, ::1] sims, double[:, ::1] x,
                      double[:, ::1] sums, cnp.int64_t[::1] counts,
                      cnp.int32_t[::1] labels):
    """Argmax each row of ``sims`` (ties to the lowest index), scatter-add
    the matching rows of ``x`` into ``sums``/``counts``, fill ``labels``,
    and return the summed cosine-distance objective."""
    cdef Py_ssize_t n = sims.shape[0]
    cdef Py_ssize_t k = sims.shape[1]
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t i, j, best
    cdef double vbest, v, obj = 0.0
    for i in range(n):
        best = 0
        vbest = sims[i, 0]
        for j in range(1, k):
            v = sims[i, j]
            if v > vbest:
                vbest = v
                best = j
        labels[i] = <cnp.int32_t> best
        counts[best] += 1
        obj += 1.0 - vbest
        for j in range(d):
            sums[best, j] += x[i, j]
    return obj
