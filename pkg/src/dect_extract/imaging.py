"""Image raster type and the geometric operations used to simulate and undo
a workstation export (affine resampling with bilinear interpolation)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dect_extract import _backend


class GeometryError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """2-D real raster, stored as a read-only ``(height, width)`` float64 array.

    Spacing is in mm per pixel.
    """

    pixels: np.ndarray
    spacing_x: float = 1.0
    spacing_y: float = 1.0

    def __post_init__(self):
        arr = np.array(self.pixels, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"image must be a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite pixel values")
        if not (self.spacing_x > 0 and self.spacing_y > 0):
            raise GeometryError(f"spacing must be positive, got ({self.spacing_x}, {self.spacing_y})")
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def same_grid(self, other: "ImageGrid") -> bool:
        return (
            self.shape == other.shape
            and self.spacing_x == other.spacing_x
            and self.spacing_y == other.spacing_y
        )

    def with_pixels(self, pixels) -> "ImageGrid":
        return ImageGrid(pixels, self.spacing_x, self.spacing_y)

    def __eq__(self, other):
        if not isinstance(other, ImageGrid):
            return NotImplemented
        return self.same_grid(other) and np.array_equal(self.pixels, other.pixels)

    def __repr__(self):
        return f"ImageGrid({self.width}x{self.height}, spacing=({self.spacing_x}, {self.spacing_y}))"


@dataclass(frozen=True)
class AffineTransform2D:
    """Output-to-source mapping ``(x, y) = (a*u + b*v + tx, c*u + d*v + ty)``
    in pixel units (pull semantics)."""

    a: float = 1.0
    b: float = 0.0
    tx: float = 0.0
    c: float = 0.0
    d: float = 1.0
    ty: float = 0.0

    @property
    def determinant(self) -> float:
        return self.a * self.d - self.b * self.c

    @classmethod
    def identity(cls) -> "AffineTransform2D":
        return cls()

    @classmethod
    def from_coefficients(cls, coeffs) -> "AffineTransform2D":
        vals = [float(v) for v in coeffs]
        if len(vals) != 6:
            raise GeometryError(f"expected 6 affine coefficients (a,b,tx,c,d,ty), got {len(vals)}")
        return cls(*vals)

    @classmethod
    def similarity(cls, scale: float, angle_deg: float, src_center, out_center) -> "AffineTransform2D":
        """Transform pulling output pixels from a source that was scaled by
        ``scale`` and rotated by ``angle_deg`` about the two centres."""
        th = math.radians(angle_deg)
        cos, sin = math.cos(th) / scale, math.sin(th) / scale
        a, b, c, d = cos, -sin, sin, cos
        ux, uy = out_center
        sx, sy = src_center
        return cls(a, b, sx - (a * ux + b * uy), c, d, sy - (c * ux + d * uy))

    def coefficients(self) -> tuple[float, ...]:
        return (self.a, self.b, self.tx, self.c, self.d, self.ty)

    def apply(self, u, v):
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return self.a * u + self.b * v + self.tx, self.c * u + self.d * v + self.ty

    def compose(self, other: "AffineTransform2D") -> "AffineTransform2D":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        a = self.a * other.a + self.b * other.c
        b = self.a * other.b + self.b * other.d
        c = self.c * other.a + self.d * other.c
        d = self.c * other.b + self.d * other.d
        tx = self.a * other.tx + self.b * other.ty + self.tx
        ty = self.c * other.tx + self.d * other.ty + self.ty
        return AffineTransform2D(a, b, tx, c, d, ty)

    def is_identity(self) -> bool:
        return self.coefficients() == (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


def invert(t: AffineTransform2D) -> AffineTransform2D:
    det = t.determinant
    if not math.isfinite(det) or abs(det) < 1e-12:
        raise GeometryError(f"singular transform (determinant {det!r})")
    a, b, c, d = t.d / det, -t.b / det, -t.c / det, t.a / det
    return AffineTransform2D(a, b, -(a * t.tx + b * t.ty), c, d, -(c * t.tx + d * t.ty))


@dataclass(frozen=True, eq=False)
class DualEnergySlice:
    low: ImageGrid
    high: ImageGrid
    label: str = ""

    def __post_init__(self):
        if not self.low.same_grid(self.high):
            raise ShapeError(f"low {self.low!r} and high {self.high!r} are not on the same grid")

    @property
    def shape(self):
        return self.low.shape

    def __eq__(self, other):
        if not isinstance(other, DualEnergySlice):
            return NotImplemented
        return self.label == other.label and self.low == other.low and self.high == other.high


def resample(src: ImageGrid, t: AffineTransform2D, out_width: int, out_height: int) -> ImageGrid:
    """Bilinear pull-resampling of ``src`` through ``t`` with clamp-to-edge."""
    det = t.determinant
    if not math.isfinite(det) or abs(det) < 1e-12:
        raise GeometryError(f"cannot resample through a singular transform (determinant {det!r})")
    if out_width < 1 or out_height < 1:
        raise GeometryError(f"output dimensions must be >= 1, got {out_width}x{out_height}")
    out = _backend.kernels.bilinear_affine(
        src.pixels, t.a, t.b, t.tx, t.c, t.d, t.ty, int(out_height), int(out_width)
    )
    sx = math.hypot(t.a * src.spacing_x, t.c * src.spacing_y)
    sy = math.hypot(t.b * src.spacing_x, t.d * src.spacing_y)
    return ImageGrid(out, sx, sy)


def flatten_pairs(inputs: DualEnergySlice, target: ImageGrid):
    """Pixel-wise training rows as ``(features, targets)`` arrays.

    ``features`` is ``(n, 2)`` with columns (low, high); rows are row-major.
    """
    if inputs.shape != target.shape:
        raise ShapeError(
            f"target shape {target.height}x{target.width} (HxW) does not match "
            f"input shape {inputs.low.height}x{inputs.low.width}"
        )
    X = np.column_stack([inputs.low.pixels.ravel(), inputs.high.pixels.ravel()])
    return X, target.pixels.ravel().copy()


def iter_pairs(inputs: DualEnergySlice, target: ImageGrid):
    """Rows as ``((low, high), target)`` tuples, mostly for small inspection."""
    X, y = flatten_pairs(inputs, target)
    for (lo, hi), t in zip(X.tolist(), y.tolist()):
        yield (lo, hi), t

