"""Dense float64 arrays and the primitive math used by forward passes.

Tensors are plain 2-D C-order ``numpy.ndarray`` values of dtype float64 and
are treated as immutable by every operation here. ``matmul`` routes through
the fixed-accumulation-order kernel (compiled or numpy fallback, bitwise
identical), which is what makes column-blocked products exactly equal to
their monolithic counterparts.
"""
from __future__ import annotations

import numpy as np

from . import _kernels
from .errors import ShapeError

_MASK64 = (1 << 64) - 1


def as_tensor(x) -> np.ndarray:
    """Coerce to a 2-D float64 array (no copy when already one)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D tensor, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed per-element accumulation order.

    Accumulation runs in ascending inner-dimension order with separate
    multiply/add roundings, so results are bit-reproducible and
    ``concat_cols(a @ w_left, a @ w_right) == a @ w`` holds bitwise for any
    column split of ``w``.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    return _kernels.matmul_ordered(a, b)


def concat_cols(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols row counts differ: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def slice_cols(t, lo: int, hi: int) -> np.ndarray:
    """Copy out the contiguous column range [lo, hi)."""
    t = as_tensor(t)
    cols = t.shape[1]
    if not (0 <= lo <= hi <= cols):
        raise IndexError(f"column range [{lo}, {hi}) out of bounds for {t.shape}")
    return t[:, lo:hi].copy()


def relu(t) -> np.ndarray:
    return np.maximum(as_tensor(t), 0.0)


def softmax_rows(t) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for stability."""
    t = as_tensor(t)
    shifted = t - t.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class RngStream:
    """Counter-based random stream (Philox 4x64).

    The 128-bit Philox key is ``(seed, stream)``: word 0 carries the user
    seed, word 1 the stream id, so independent substreams for init, batching
    and data generation never overlap. Identical (seed, stream) pairs yield
    identical draw sequences on every platform.
    """

    ALGORITHM = "philox4x64"

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def normal(self, rows: int, cols: int) -> np.ndarray:
        return self._gen.standard_normal((rows, cols), dtype=np.float64)

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def uniform(self, size: int) -> np.ndarray:
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def he_init(rows: int, cols: int, rng: RngStream) -> np.ndarray:
    """Gaussian fan-in init: i.i.d. normal(0, 2/rows)."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"he_init needs positive dims, got {rows}x{cols}")
    return rng.normal(rows, cols) * np.sqrt(2.0 / rows)
