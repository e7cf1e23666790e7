"""Pure-numpy fallback for the compiled matmul kernel.

Accumulates rank-1 updates in ascending inner-dimension order. Per output
element this performs the exact same rounded multiply-then-add sequence as
the compiled kernel, so the two backends agree bitwise.
"""
import numpy as np


def matmul_ordered(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    for p in range(k):
        out += a[:, p, np.newaxis] * b[p, np.newaxis, :]
    return out
