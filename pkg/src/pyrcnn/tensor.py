"""Dense float64 arrays with validation, the carrier type for the whole package.

Everything numeric — images, feature maps, kernels, feature vectors — travels
as a `Tensor`: a row-major (height, width, channel) float64 block that is
validated on construction and read-only afterwards.  There is deliberately no
broadcasting and no view machinery; parameter updates elsewhere replace whole
tensors instead of mutating them.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


class TensorError(ValueError):
    """Bad shape, bad data, or out-of-bounds access on a Tensor."""


def _validated(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 0:
        raise TensorError("tensor must have at least one axis")
    bad = [e for e in arr.shape if e < 1]
    if bad:
        raise TensorError(f"all extents must be >= 1, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise TensorError("tensor values must be finite (no NaN/Inf)")
    arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable dense array of 64-bit reals in row-major order."""

    __slots__ = ("array",)

    array: np.ndarray

    def __init__(self, shape: Sequence[int], values) -> None:
        shape = tuple(int(e) for e in shape)
        if len(shape) == 0:
            raise TensorError("shape must be nonempty")
        data = np.array(values, dtype=np.float64).reshape(-1)
        expected = int(np.prod(shape)) if all(e >= 1 for e in shape) else -1
        if data.size != expected:
            raise TensorError(
                f"shape {shape} requires {expected} values, got {data.size}"
            )
        self.array = _validated(np.ascontiguousarray(data.reshape(shape)))

    @classmethod
    def from_array(cls, arr) -> "Tensor":
        """Copy an array-like into a validated Tensor."""
        a = np.array(arr, dtype=np.float64, order="C")
        t = cls.__new__(cls)
        t.array = _validated(a)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def size(self) -> int:
        return self.array.size

    def tolist(self):
        return self.array.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def create_tensor(shape: Sequence[int], values) -> Tensor:
    """Build a Tensor from an explicit shape and a flat row-major value list."""
    return Tensor(shape, values)


def crop(t: Tensor, origin: Sequence[int], extent: Sequence[int]) -> Tensor:
    """Copy the sub-block starting at `origin` with the given per-axis `extent`.

    `origin` and `extent` must each supply one entry per axis; the region has
    to lie fully inside the tensor (no clamping, no padding).
    """
    if len(origin) != t.array.ndim or len(extent) != t.array.ndim:
        raise TensorError(
            f"origin/extent must have {t.array.ndim} entries, got "
            f"{len(origin)}/{len(extent)}"
        )
    slices = []
    for axis, (o, e, dim) in enumerate(zip(origin, extent, t.shape)):
        o, e = int(o), int(e)
        if e < 1:
            raise TensorError(f"extent must be >= 1 on axis {axis}, got {e}")
        if o < 0 or o + e > dim:
            raise TensorError(
                f"crop out of bounds on axis {axis}: origin {o} + extent {e} "
                f"exceeds size {dim}"
            )
        slices.append(slice(o, o + e))
    return Tensor.from_array(t.array[tuple(slices)])


def approx_equal(a: Tensor, b: Tensor, tol: float) -> bool:
    """True iff shapes match and the max absolute difference is <= tol."""
    if tol < 0:
        raise TensorError(f"tolerance must be nonnegative, got {tol}")
    if a.shape != b.shape:
        return False
    return bool(np.max(np.abs(a.array - b.array)) <= tol)
