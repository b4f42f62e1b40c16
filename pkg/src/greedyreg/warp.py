"""Applying transforms: resampling, composition, landmark mapping, Jacobians.

Everything uses the pull-back convention: an output pixel at ``x`` reads the
source image at the transformed position. Out-of-range reads clamp to the
nearest edge pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AffineTransform2D, DisplacementField, LandmarkSet, ScalarImage


def _cells(coord: np.ndarray, size: int):
    c = np.clip(coord, 0.0, size - 1)
    i0 = np.floor(c).astype(np.intp)
    i1 = np.minimum(i0 + 1, size - 1)
    return i0, i1, c - i0


def _lerp(a, b, t):
    return a + t * (b - a)


def sample_bilinear(arr: np.ndarray, x, y) -> np.ndarray:
    """Bilinear read of a 2D array at fractional ``(x, y)``, clamp-to-edge."""
    h, w = arr.shape
    x0, x1, fx = _cells(np.asarray(x, dtype=np.float64), w)
    y0, y1, fy = _cells(np.asarray(y, dtype=np.float64), h)
    # a + f * (b - a) reproduces constants exactly
    top = _lerp(arr[y0, x0], arr[y0, x1], fx)
    bot = _lerp(arr[y1, x0], arr[y1, x1], fx)
    return _lerp(top, bot, fy)


def _axis_slope(g, pos: np.ndarray, size: int):
    """Symmetric derivative of the clamped piecewise-linear interpolant along one axis.

    ``g(i)`` evaluates the interpolant at integer index arrays. On a knot the
    mean of the left and right slopes is returned, which is what a central
    finite difference converges to.
    """
    base = np.floor(pos).astype(np.intp)
    on_knot = pos == base

    def at(i):
        return g(np.clip(i, 0, size - 1))

    right = at(base + 1) - at(base)
    left = at(base) - at(base - 1)
    return np.where(on_knot, 0.5 * (left + right), right)


def sample_bilinear_grad(arr: np.ndarray, x, y):
    """Bilinear value and its spatial derivatives ``(value, d/dx, d/dy)`` at ``(x, y)``."""
    h, w = arr.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x0, x1, fx = _cells(x, w)
    y0, y1, fy = _cells(y, h)

    def along_x(cols):
        return _lerp(arr[y0, cols], arr[y1, cols], fy)

    def along_y(rows):
        return _lerp(arr[rows, x0], arr[rows, x1], fx)

    value = _lerp(_lerp(arr[y0, x0], arr[y0, x1], fx), _lerp(arr[y1, x0], arr[y1, x1], fx), fy)
    return value, _axis_slope(along_x, x, w), _axis_slope(along_y, y, h)


def _grid(shape):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    return xx.astype(np.float64), yy.astype(np.float64)


def _apply_fill(out, x, y, shape, fill):
    if fill is None:
        return out
    h, w = shape
    outside = (x < 0) | (x > w - 1) | (y < 0) | (y > h - 1)
    return np.where(outside, fill, out)


def warp_array(moving: np.ndarray, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    xx, yy = _grid(dx.shape)
    return sample_bilinear(moving, xx + dx, yy + dy)


def warp_image(moving: ScalarImage, field: DisplacementField, fill: float | None = None) -> ScalarImage:
    """``out(x) = moving(x + u(x))``. ``fill=None`` clamps; a number replaces out-of-frame reads."""
    if moving.shape != field.shape:
        raise ValueError(f"image shape {moving.shape} != field shape {field.shape}")
    xx, yy = _grid(field.shape)
    x, y = xx + field.dx, yy + field.dy
    out = sample_bilinear(moving.data, x, y)
    return ScalarImage(_apply_fill(out, x, y, moving.shape, fill))


def affine_grid(A: AffineTransform2D, shape):
    xx, yy = _grid(shape)
    return A.apply(xx, yy)


def warp_image_affine(moving: ScalarImage, A: AffineTransform2D, fill: float | None = None,
                      shape: tuple[int, int] | None = None) -> ScalarImage:
    """``out(x) = moving(A(x))`` on a grid of ``shape`` (default: the moving image's)."""
    shape = moving.shape if shape is None else tuple(shape)
    x, y = affine_grid(A, shape)
    out = sample_bilinear(moving.data, x, y)
    return ScalarImage(_apply_fill(out, x, y, moving.shape, fill))


def compose(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Displacement of ``x -> outer_map(inner_map(x))``: ``v(x) + w(x + v(x))``."""
    if outer.shape != inner.shape:
        raise ValueError(f"field shapes differ: {outer.shape} vs {inner.shape}")
    xx, yy = _grid(inner.shape)
    x = xx + inner.dx
    y = yy + inner.dy
    return DisplacementField(inner.dx + sample_bilinear(outer.dx, x, y),
                             inner.dy + sample_bilinear(outer.dy, x, y))


@dataclass(frozen=True)
class TotalTransform:
    """Fixed-frame ``x`` maps to moving-frame ``A(x + u(x))``."""

    affine: AffineTransform2D
    field: DisplacementField

    def apply(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        ux = sample_bilinear(self.field.dx, x, y)
        uy = sample_bilinear(self.field.dy, x, y)
        return self.affine.apply(x + ux, y + uy)


def map_landmarks(points: LandmarkSet, T: TotalTransform) -> LandmarkSet:
    if len(points) == 0:
        return points
    x, y = T.apply(points.x, points.y)
    return LandmarkSet(np.column_stack([x, y]))


def jacobian_det(field: DisplacementField) -> ScalarImage:
    """Determinant of the Jacobian of ``x + u(x)``; central differences, one-sided at borders."""
    def grad(a, axis):
        if a.shape[axis] < 2:
            return np.zeros_like(a)
        return np.gradient(a, axis=axis)

    dux_dx = grad(field.dx, 1)
    dux_dy = grad(field.dx, 0)
    duy_dx = grad(field.dy, 1)
    duy_dy = grad(field.dy, 0)
    return ScalarImage((1.0 + dux_dx) * (1.0 + duy_dy) - dux_dy * duy_dx)
