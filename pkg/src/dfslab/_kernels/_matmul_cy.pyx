# cython: boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled fixed-order matrix multiply.

Each output element accumulates its products in ascending inner-dimension
order, with the multiply and the add rounded separately (the build disables
FMA contraction). This makes results bit-reproducible, makes column-blocked
products bitwise equal to the monolithic product, and keeps the compiled
kernel and the numpy fallback interchangeable down to the last bit.
"""
import numpy as np


def matmul_ordered(const double[:, :] a, const double[:, :] b):
    cdef Py_ssize_t m = a.shape[0]
    cdef Py_ssize_t k = a.shape[1]
    cdef Py_ssize_t n = b.shape[1]
    out_arr = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, p, j
    cdef double a_ip
    for i in range(m):
        for p in range(k):
            a_ip = a[i, p]
            for j in range(n):
                out[i, j] = out[i, j] + a_ip * b[p, j]
    return out_arr
