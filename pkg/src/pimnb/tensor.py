"""Dense float32 tensors and the arithmetic every other module builds on.

Tensors are immutable values: the wrapped numpy buffer is marked read-only,
so they are safe to share across threads and between model copies. Storage
is 32-bit; reductions accumulate in 64-bit before rounding back, which keeps
variance computations of near-constant data well conditioned.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyReductionError, InvalidShapeError, ShapeError

_ELEMENTWISE_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


class Tensor:
    """Row-major float32 array with a frozen buffer.

    ``data`` exposes the flat row-major view; ``array`` the shaped view.
    Slicing or reshaping callers receive copies, never aliased writable
    memory.
    """

    __slots__ = ("array",)

    array: np.ndarray

    def __init__(self, values):
        arr = np.array(values, dtype=np.float32, order="C", copy=True)
        _check_shape(arr.shape)
        arr.setflags(write=False)
        self.array = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt a freshly computed buffer without copying.

        Callers must hand over ownership: the array may not be mutated
        through any other reference afterwards.
        """
        if arr.dtype != np.float32 or not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr, dtype=np.float32)
        _check_shape(arr.shape)
        arr.setflags(write=False)
        t = object.__new__(cls)
        t.array = arr
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.array.shape)

    @property
    def data(self) -> np.ndarray:
        """Flat row-major (read-only) view of the storage."""
        return self.array.reshape(-1)

    @property
    def size(self) -> int:
        return int(self.array.size)

    def tolist(self):
        return self.array.tolist()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.array.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _check_shape(shape: Sequence[int]) -> None:
    if len(shape) == 0:
        raise InvalidShapeError("tensor shape must be non-empty")
    if any(int(d) < 1 for d in shape):
        raise InvalidShapeError(f"all dimensions must be >= 1, got {tuple(shape)}")


def tensor(values) -> Tensor:
    """Build a tensor from nested sequences or an ndarray (copies)."""
    return Tensor(values)


def zeros(shape: Iterable[int]) -> Tensor:
    """All-zero tensor of the given shape."""
    dims = tuple(int(d) for d in shape)
    _check_shape(dims)
    return Tensor._wrap(np.zeros(dims, dtype=np.float32))


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Apply ``op`` in {'add','sub','mul'} to same-shaped tensors."""
    try:
        fn = _ELEMENTWISE_OPS[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if a.shape != b.shape:
        raise ShapeError(f"elementwise {op}: shapes {a.shape} and {b.shape} differ")
    return Tensor._wrap(fn(a.array, b.array))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of [m,k]·[k,n], accumulated in float64."""
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    out = a.array.astype(np.float64) @ b.array.astype(np.float64)
    return Tensor._wrap(out.astype(np.float32))


def moments(t: Tensor, axes: Iterable[int]) -> tuple[Tensor, Tensor]:
    """Population mean and (biased) variance over ``axes``.

    Accumulates in float64 with a two-pass variance, so var >= 0 holds
    exactly; results are rounded back to float32. Reducing all axes yields
    shape-[1] tensors.
    """
    ax = tuple(int(a) for a in axes)
    if len(ax) == 0:
        raise EmptyReductionError("moments requires at least one reduction axis")
    rank = len(t.shape)
    if len(set(ax)) != len(ax) or any(a < 0 or a >= rank for a in ax):
        raise ShapeError(f"axes {ax} invalid for shape {t.shape}")
    arr = t.array.astype(np.float64)
    mean = arr.mean(axis=ax, keepdims=True)
    var = np.mean((arr - mean) ** 2, axis=ax, keepdims=True)
    mean = np.squeeze(mean, axis=ax)
    var = np.squeeze(var, axis=ax)
    if mean.ndim == 0:
        mean = mean.reshape(1)
        var = var.reshape(1)
    return Tensor._wrap(mean.astype(np.float32)), Tensor._wrap(var.astype(np.float32))
