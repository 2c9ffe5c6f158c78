# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled transport kernels.

Same contract as the numpy fallback: each output row is accumulated
sequentially in 64-bit, rows are distributed over threads, so results
do not depend on the thread count.
"""

import numpy as np

from cython.parallel cimport prange
from libc.math cimport INFINITY, exp, log

ctypedef fused cost_t:
    float
    double

BACKEND = "compiled"


def lse_rows(const cost_t[:, ::1] cost, const double[::1] pot, double inv_reg, int threads=1):
    """Row-wise log-sum-exp: out[i] = log sum_j exp((pot[j] - cost[i,j]) * inv_reg)."""
    cdef Py_ssize_t n = cost.shape[0]
    cdef Py_ssize_t m = cost.shape[1]
    if pot.shape[0] != m:
        raise ValueError("potential length does not match cost columns")
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double mx, s, v
    cdef int nt = threads if threads > 0 else 1
    for i in prange(n, nogil=True, num_threads=nt, schedule="static"):
        mx = -INFINITY
        for j in range(m):
            v = (pot[j] - <double> cost[i, j]) * inv_reg
            if v > mx:
                mx = v
        s = 0.0
        for j in range(m):
            s = s + exp((pot[j] - <double> cost[i, j]) * inv_reg - mx)
        out[i] = mx + log(s)
    return out_arr


def cost_rows(const cost_t[:, ::1] cost, const double[::1] f, const double[::1] g, double inv_reg, int threads=1):
    """Per-row transported cost of the implicit plan exp((f+g-cost)*inv_reg)."""
    cdef Py_ssize_t n = cost.shape[0]
    cdef Py_ssize_t m = cost.shape[1]
    if f.shape[0] != n or g.shape[0] != m:
        raise ValueError("potential lengths do not match cost shape")
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double s, cij
    cdef int nt = threads if threads > 0 else 1
    for i in prange(n, nogil=True, num_threads=nt, schedule="static"):
        s = 0.0
        for j in range(m):
            cij = <double> cost[i, j]
            s = s + exp((f[i] + g[j] - cij) * inv_reg) * cij
        out[i] = s
    return out_arr


def row_sums(cost, f, g, double inv_reg, int threads=1):
    """Row marginals of the implicit plan exp((f+g-cost)*inv_reg)."""
    f = np.asarray(f, dtype=np.float64)
    return np.exp(f * inv_reg + lse_rows(cost, np.asarray(g, dtype=np.float64), inv_reg, threads))
