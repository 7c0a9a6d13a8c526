"""Dense N-dimensional tensor type used throughout the pipeline.

A Tensor is a thin, immutable-by-convention wrapper around a C-contiguous
numpy array in the run-wide precision (float32 by default, float64 when
double precision is selected for gradient verification). Element (i0,..,ik)
lives at flat index sum(i_j * stride_j) with row-major strides, and every
file format in this package inherits that layout.

Reductions use a fixed ascending-index order so results are reproducible
bit-for-bit regardless of internal parallelism.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError

_MODES = {"single": np.float32, "double": np.float64}
_active_mode = "single"


def set_precision(mode: str) -> None:
    """Select the run-wide storage precision ("single" or "double")."""
    if mode not in _MODES:
        raise ConfigError(f"unknown precision mode {mode!r}; expected one of {sorted(_MODES)}")
    global _active_mode
    _active_mode = mode


def get_precision() -> str:
    return _active_mode


def active_dtype() -> np.dtype:
    return np.dtype(_MODES[_active_mode])


class Tensor:
    """Dense array with explicit shape and flat row-major storage."""

    __slots__ = ("array",)

    def __init__(self, values) -> None:
        arr = np.asarray(values, dtype=active_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0 or any(e < 1 for e in arr.shape):
            raise ShapeError(f"invalid tensor shape {arr.shape}: all extents must be >= 1")
        self.array = np.ascontiguousarray(arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def rank(self) -> int:
        return self.array.ndim

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the storage (last axis fastest)."""
        return self.array.reshape(-1)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.array.reshape(-1)[0])

    def tolist(self):
        return self.array.tolist()

    def copy(self) -> "Tensor":
        return Tensor(self.array.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.array.dtype})"


def full(shape: Sequence[int], fill: float) -> Tensor:
    """New tensor of the given shape with every element equal to fill."""
    shape = tuple(int(e) for e in shape)
    if len(shape) == 0 or any(e < 1 for e in shape):
        raise ShapeError(f"invalid tensor shape {shape}: all extents must be >= 1")
    return Tensor(np.full(shape, fill, dtype=active_dtype()))


def zeros(shape: Sequence[int]) -> Tensor:
    return full(shape, 0.0)


def map2(a: Tensor, b: Tensor, op: Callable) -> Tensor:
    """Elementwise combination of two same-shape tensors.

    `op` must be a binary scalar function built from arithmetic (it is
    applied to whole arrays, so numpy broadcasts it elementwise).
    """
    if a.shape != b.shape:
        raise ShapeError(f"map2 shape mismatch: {a.shape} vs {b.shape}")
    return Tensor(op(a.array, b.array))


def add(a: Tensor, b: Tensor) -> Tensor:
    return map2(a, b, np.add)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return map2(a, b, np.subtract)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return map2(a, b, np.multiply)


def scale(a: Tensor, s: float) -> Tensor:
    return Tensor(a.array * active_dtype().type(s))


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor | float:
    """Sum along one axis (dropping it) or over all elements.

    The all-element reduction is exactly the sequential left-to-right sum
    of the flat data; axis reductions accumulate slices in ascending index
    order. Both are bit-reproducible.
    """
    if axis is None:
        # cumsum materializes the sequential prefix sums; its last entry is
        # the left-to-right total bit-for-bit (asserted by the test suite).
        return float(np.cumsum(a.data)[-1])
    if not (0 <= axis < a.rank):
        raise ShapeError(f"axis {axis} out of range for rank-{a.rank} tensor")
    arr = a.array
    acc = arr.take(0, axis=axis).astype(active_dtype(), copy=True)
    for i in range(1, arr.shape[axis]):
        acc += arr.take(i, axis=axis)
    if acc.ndim == 0:
        acc = acc.reshape(1)
    return Tensor(acc)


def argmax_last(a: Tensor) -> np.ndarray:
    """Index of the maximum along the last axis; ties go to the LARGEST index.

    Class indices are ordered low < medium < high, so resolving ties upward
    is the conservative choice reused by every voting rule in the pipeline.
    """
    arr = a.array
    n = arr.shape[-1]
    rev = np.argmax(arr[..., ::-1], axis=-1)
    return (n - 1 - rev).astype(np.int64)
