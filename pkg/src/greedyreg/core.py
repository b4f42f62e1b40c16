"""Domain types shared by every registration stage.

All rasters are stored as 2D float64 numpy arrays indexed ``[row, col]``.
Pixel coordinates follow ``x = column``, ``y = row`` with the origin at the
center of pixel (0, 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def _as_raster(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


def _reshape_buffer(width: int, height: int, data, name: str) -> np.ndarray:
    if width < 1 or height < 1:
        raise ValueError(f"{name}: width and height must be >= 1")
    flat = np.asarray(data, dtype=np.float64).ravel()
    if flat.size != width * height:
        raise ValueError(
            f"{name}: buffer length {flat.size} != width*height = {width * height}")
    return flat.reshape(height, width)


@dataclass(frozen=True, eq=False)
class ScalarImage:
    """Single-channel float raster, intensities nominally in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _as_raster(self.data, "ScalarImage"))

    @classmethod
    def from_buffer(cls, width: int, height: int, data) -> "ScalarImage":
        return cls(_reshape_buffer(width, height, data, "ScalarImage"))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, ScalarImage):
            return NotImplemented
        return np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class RgbImage:
    """8-bit colour raster of shape (height, width, 3)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"RgbImage must have shape (h, w, 3), got {arr.shape}")
        if arr.dtype != np.uint8:
            if np.any(arr < 0) or np.any(arr > 255) or np.any(arr != np.round(arr)):
                raise ValueError("RgbImage values must be integers in [0, 255]")
            arr = arr.astype(np.uint8)
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_buffer(cls, width: int, height: int, data) -> "RgbImage":
        if width < 1 or height < 1:
            raise ValueError("RgbImage: width and height must be >= 1")
        flat = np.asarray(data).ravel()
        if flat.size != 3 * width * height:
            raise ValueError(
                f"RgbImage: buffer length {flat.size} != 3*width*height = {3 * width * height}")
        return cls(flat.reshape(height, width, 3))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        if not isinstance(other, RgbImage):
            return NotImplemented
        return np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-pixel displacement ``u(x)``; the map is ``x -> x + u(x)``."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        dx = _as_raster(self.dx, "DisplacementField.dx")
        dy = _as_raster(self.dy, "DisplacementField.dy")
        if dx.shape != dy.shape:
            raise ValueError(f"dx shape {dx.shape} != dy shape {dy.shape}")
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "dy", dy)

    @classmethod
    def zeros(cls, width: int, height: int) -> "DisplacementField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    @classmethod
    def from_buffer(cls, width: int, height: int, dx, dy) -> "DisplacementField":
        return cls(_reshape_buffer(width, height, dx, "DisplacementField.dx"),
                   _reshape_buffer(width, height, dy, "DisplacementField.dy"))

    @property
    def width(self) -> int:
        return self.dx.shape[1]

    @property
    def height(self) -> int:
        return self.dx.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape

    def max_norm(self) -> float:
        return float(np.sqrt(self.dx ** 2 + self.dy ** 2).max())

    def __eq__(self, other):
        if not isinstance(other, DisplacementField):
            return NotImplemented
        return np.array_equal(self.dx, other.dx) and np.array_equal(self.dy, other.dy)


@dataclass(frozen=True)
class AffineTransform2D:
    """Planar affine ``T(x) = a @ (x - c) + c + t``."""

    a11: float = 1.0
    a12: float = 0.0
    a21: float = 0.0
    a22: float = 1.0
    tx: float = 0.0
    ty: float = 0.0
    cx: float = 0.0
    cy: float = 0.0

    def __post_init__(self):
        for name in ("a11", "a12", "a21", "a22", "tx", "ty", "cx", "cy"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"AffineTransform2D.{name} is not finite")
            object.__setattr__(self, name, value)
        if abs(self.det) <= 1e-12:
            raise ValueError("AffineTransform2D matrix is singular")

    @classmethod
    def identity(cls, cx: float = 0.0, cy: float = 0.0) -> "AffineTransform2D":
        return cls(cx=cx, cy=cy)

    @classmethod
    def rigid(cls, theta: float, tx: float, ty: float,
              cx: float = 0.0, cy: float = 0.0) -> "AffineTransform2D":
        c, s = math.cos(theta), math.sin(theta)
        return cls(c, -s, s, c, tx, ty, cx, cy)

    @property
    def det(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a21, self.a22]])

    @property
    def rotation_angle(self) -> float:
        """Angle of the rotation part, exact for rigid transforms."""
        return math.atan2(self.a21 - self.a12, self.a11 + self.a22)

    def params(self) -> np.ndarray:
        return np.array([self.a11, self.a12, self.a21, self.a22, self.tx, self.ty])

    def with_params(self, p) -> "AffineTransform2D":
        return AffineTransform2D(*(float(v) for v in p), cx=self.cx, cy=self.cy)

    def rescaled(self, scale: float) -> "AffineTransform2D":
        """The same mapping expressed on a grid whose coordinates are multiplied by ``scale``."""
        return AffineTransform2D(self.a11, self.a12, self.a21, self.a22,
                                 self.tx * scale, self.ty * scale,
                                 self.cx * scale, self.cy * scale)

    def apply(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        rx = x - self.cx
        ry = y - self.cy
        return (self.a11 * rx + self.a12 * ry + self.cx + self.tx,
                self.a21 * rx + self.a22 * ry + self.cy + self.ty)


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """Ordered 2D points; index is the pairing key between sets."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 2)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"LandmarkSet points must have shape (n, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("LandmarkSet contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def x(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.points[:, 1]

    def __eq__(self, other):
        if not isinstance(other, LandmarkSet):
            return NotImplemented
        return np.array_equal(self.points, other.points)


@dataclass(frozen=True)
class RegistrationParams:
    """Every tunable of the two-stage pipeline.

    Smoothing widths are in full-resolution working pixels; the diffeomorphic
    stage divides them by each pyramid factor.
    """

    sigma_s: float = 6.0
    sigma_t: float = 5.0
    iters_per_level: tuple[int, ...] = (100, 50, 10)
    ncc_scale: float = 25.0
    epsilon_max: float = 1.0
    seed: int = 42
    n_candidates: int = 5000
    pyramid_factors: tuple[int, ...] = (4, 2, 1)
    resample_factor: int = 25

    def __post_init__(self):
        object.__setattr__(self, "iters_per_level", tuple(int(n) for n in self.iters_per_level))
        object.__setattr__(self, "pyramid_factors", tuple(int(f) for f in self.pyramid_factors))
        if self.sigma_s < 0 or self.sigma_t < 0:
            raise ValueError("sigma_s and sigma_t must be >= 0")
        if any(n < 0 for n in self.iters_per_level):
            raise ValueError("iteration counts must be >= 0")
        if len(self.iters_per_level) != len(self.pyramid_factors):
            raise ValueError("iters_per_level and pyramid_factors must have equal length")
        check_factors(self.pyramid_factors)
        if self.ncc_scale < 1:
            raise ValueError("ncc_scale must be >= 1")
        if self.resample_factor < 1:
            raise ValueError("resample_factor must be >= 1")
        if self.epsilon_max <= 0:
            raise ValueError("epsilon_max must be > 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")


def check_factors(factors: Sequence[int]) -> None:
    if len(factors) == 0:
        raise ValueError("pyramid factor list is empty")
    if any(int(f) != f or f < 1 for f in factors):
        raise ValueError(f"pyramid factors must be positive integers: {list(factors)}")
    if any(a <= b for a, b in zip(factors, factors[1:])):
        raise ValueError(f"pyramid factors must be strictly decreasing: {list(factors)}")
    if factors[-1] != 1:
        raise ValueError(f"pyramid factors must end at 1: {list(factors)}")


def default_params() -> RegistrationParams:
    return RegistrationParams()


class RegistrationError(RuntimeError):
    """Numerical failure during registration, e.g. a non-finite objective."""
