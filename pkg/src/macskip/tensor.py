"""Minimal dense tensor container shared by the kernels.

Storage is a flat contiguous row-major numpy array plus a Shape; a float
tensor holds float32 with scale 1.0, a fixed tensor holds word-size raw
integers with a per-tensor symmetric quantization scale:

    value = raw / 2**fraction_bits * scale

No strides, no broadcasting, no views across tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import OutOfBounds, ShapeMismatch, UsageError
from .numerics import FixedPoint, QFormat


@dataclass(frozen=True)
class Shape:
    """Positive extents, rank 1..4, row-major addressing."""

    dims: tuple[int, ...]

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if not 1 <= len(dims) <= 4:
            raise ShapeMismatch(f"rank must be 1..4, got {len(dims)}")
        if any(d < 1 for d in dims):
            raise ShapeMismatch(f"extents must be positive, got {dims}")

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def volume(self) -> int:
        out = 1
        for d in self.dims:
            out *= d
        return out

    def offset(self, coords: Sequence[int]) -> int:
        """Row-major offset of a coordinate tuple; OutOfBounds if outside."""
        if len(coords) != self.rank:
            raise OutOfBounds(f"expected {self.rank} coords, got {len(coords)}")
        off = 0
        for c, d in zip(coords, self.dims):
            if not 0 <= c < d:
                raise OutOfBounds(f"coords {tuple(coords)} outside shape {self.dims}")
            off = off * d + c
        return off


@dataclass
class Tensor:
    """Flat row-major storage plus shape, scale and optional Q-format.

    fmt None means float payload (data float32, scale 1.0 unless the
    caller tracks an external activation scale); fmt set means data
    holds raw integers of that format.
    """

    shape: Shape
    data: np.ndarray
    scale: float = 1.0
    fmt: QFormat | None = None

    def __post_init__(self) -> None:
        flat = np.ascontiguousarray(self.data).reshape(-1)
        if flat.size != self.shape.volume:
            raise ShapeMismatch(
                f"data length {flat.size} != shape volume {self.shape.volume}"
            )
        if not self.scale > 0:
            raise UsageError("scale must be positive")
        self.data = flat

    @property
    def is_fixed(self) -> bool:
        return self.fmt is not None

    @property
    def nd(self) -> np.ndarray:
        """The storage viewed with its full shape (no copy)."""
        return self.data.reshape(self.shape.dims)


def tensor_float(values: np.ndarray | Sequence[float], dims: Sequence[int]) -> Tensor:
    arr = np.asarray(values, dtype=np.float32)
    return Tensor(Shape(tuple(dims)), arr, scale=1.0, fmt=None)


def tensor_index(t: Tensor, coords: Sequence[int]) -> float | FixedPoint:
    """Element at a coordinate tuple; FixedPoint for fixed tensors."""
    off = t.shape.offset(coords)
    if t.is_fixed:
        return FixedPoint(int(t.data[off]), t.fmt)
    return float(t.data[off])


def quantize_tensor(t: Tensor, fmt: QFormat) -> Tensor:
    """Symmetric per-tensor quantization of a float tensor.

    scale = max|v| / max-representable, so the largest element lands on
    the top raw code; an all-zero tensor gets scale 1.0 and zero raws.
    Elementwise error is at most half a quantization step.
    """
    if t.is_fixed:
        raise UsageError("tensor is already fixed point")
    vals = t.data.astype(np.float64)
    if not np.all(np.isfinite(vals)):
        raise UsageError("cannot quantize non-finite values")
    max_abs = float(np.max(np.abs(vals))) if vals.size else 0.0
    if max_abs == 0.0:
        raw = np.zeros(vals.shape, dtype=np.int32)
        return Tensor(t.shape, raw, scale=1.0, fmt=fmt)
    scale = max_abs / fmt.max_value
    raw = np.rint(vals / scale * (1 << fmt.fraction_bits)).astype(np.int64)
    raw = np.clip(raw, fmt.raw_min, fmt.raw_max).astype(np.int32)
    return Tensor(t.shape, raw, scale=scale, fmt=fmt)


def dequantize_tensor(t: Tensor) -> Tensor:
    """Exact float reconstruction raw / 2**f * scale."""
    if not t.is_fixed:
        raise UsageError("tensor is not fixed point")
    vals = t.data.astype(np.float64) / (1 << t.fmt.fraction_bits) * t.scale
    return Tensor(t.shape, vals.astype(np.float32), scale=1.0, fmt=None)
