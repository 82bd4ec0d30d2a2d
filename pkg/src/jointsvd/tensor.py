"""Weight tensor containers and the general unfold/fold/stack primitives.

Convolution weights are plain ``numpy`` arrays laid out as ``(F1, F2, I, O)``
(kernel height, kernel width, input channels, output channels).  The general
unfolding merges kernel height with input channels on the rows and kernel
width with output channels on the columns::

    M[f1 * I + i, f2 * O + o] = W[f1, f2, i, o]

so ``M`` has shape ``(F1*I, F2*O)``.  With this ordering the fold of a left
factor ``(F1*I, r)`` is directly an ``(F1, 1, I, r)`` kernel and the fold of a
right factor ``(r, F2*O)`` an ``(1, F2, r, O)`` kernel.
"""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from jointsvd.errors import DimensionError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Shape4(NamedTuple):
    f1: int
    f2: int
    i: int
    o: int

    @classmethod
    def of(cls, shape: Sequence[int]) -> "Shape4":
        if len(shape) != 4:
            raise DimensionError(f"expected 4 extents, got {tuple(shape)}")
        out = cls(*(int(s) for s in shape))
        if min(out) < 1:
            raise DimensionError(f"all extents must be >= 1, got {tuple(out)}")
        return out

    @property
    def size(self) -> int:
        return self.f1 * self.f2 * self.i * self.o

    @property
    def unfolded(self) -> tuple[int, int]:
        return self.f1 * self.i, self.f2 * self.o

    def transposed(self) -> "Shape4":
        """Shape whose unfolding is the transpose of this one's."""
        return Shape4(self.f2, self.f1, self.o, self.i)


def as_tensor4(w, dtype=None) -> np.ndarray:
    """Validate ``w`` as a finite 4-D float tensor and return it as an array."""
    arr = np.asarray(w, dtype=dtype)
    if arr.ndim != 4:
        raise DimensionError(f"expected a 4-D tensor, got {arr.ndim}-D")
    Shape4.of(arr.shape)
    if arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def as_matrix(m, dtype=None) -> np.ndarray:
    arr = np.asarray(m, dtype=dtype)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"expected a non-empty 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix contains NaN or Inf")
    return arr


def unfold(w) -> np.ndarray:
    """General unfolding of an ``(F1, F2, I, O)`` tensor to ``(F1*I, F2*O)``."""
    w = as_tensor4(w)
    f1, f2, i, o = w.shape
    return np.ascontiguousarray(w.transpose(0, 2, 1, 3)).reshape(f1 * i, f2 * o)


def fold(m, shape) -> np.ndarray:
    """Inverse of :func:`unfold` for the given target ``shape``."""
    shape = Shape4.of(shape)
    m = np.asarray(m)
    if m.ndim != 2 or m.shape != shape.unfolded:
        raise DimensionError(
            f"cannot fold matrix of shape {m.shape} into {tuple(shape)}: "
            f"expected {shape.unfolded}"
        )
    t = m.reshape(shape.f1, shape.i, shape.f2, shape.o).transpose(0, 2, 1, 3)
    return np.ascontiguousarray(t)


def stack_vertical(ms: Sequence) -> np.ndarray:
    if len(ms) == 0:
        raise DimensionError("cannot stack an empty list")
    ms = [as_matrix(m) for m in ms]
    cols = {m.shape[1] for m in ms}
    if len(cols) != 1:
        raise DimensionError(f"vertical stack needs equal column counts, got {sorted(cols)}")
    return np.vstack(ms)


def stack_horizontal(ms: Sequence) -> np.ndarray:
    if len(ms) == 0:
        raise DimensionError("cannot stack an empty list")
    ms = [as_matrix(m) for m in ms]
    rows = {m.shape[0] for m in ms}
    if len(rows) != 1:
        raise DimensionError(f"horizontal stack needs equal row counts, got {sorted(rows)}")
    return np.hstack(ms)


def transpose_tensor(w) -> np.ndarray:
    """Swap the (F1, I) and (F2, O) roles: ``unfold(transpose_tensor(w)) == unfold(w).T``."""
    return np.ascontiguousarray(np.asarray(w).transpose(1, 0, 3, 2))
