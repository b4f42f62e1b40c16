"""Synthetic registration problems with known ground truth.

A moving image is generated from a fixed texture by pulling it back through
``y -> A(y + v(y))`` where ``A`` is an affine and ``v`` a smooth random field.
Landmark correspondences are obtained by inverting that map numerically.
"""

from __future__ import annotations

import math

import numpy as np

from .core import AffineTransform2D, DisplacementField, LandmarkSet, ScalarImage
from .filters import smooth_array
from .warp import TotalTransform, sample_bilinear


def smooth_noise_texture(size: int = 256, seed: int = 0, sigmas=(12.0, 3.0),
                         weights=(1.0, 0.5)) -> ScalarImage:
    """Sum of Gaussian-smoothed white noise at several scales, rescaled to [0.05, 0.95]."""
    rng = np.random.default_rng(seed)
    img = np.zeros((size, size))
    for sigma, weight in zip(sigmas, weights):
        layer = smooth_array(rng.standard_normal((size, size)), sigma)
        img += weight * layer / layer.std()
    img = (img - img.min()) / (img.max() - img.min())
    return ScalarImage(0.05 + 0.9 * img)


def random_smooth_field(shape, max_disp: float = 8.0, sigma: float = 12.0,
                        seed: int = 0) -> DisplacementField:
    rng = np.random.default_rng(seed)
    dx = smooth_array(rng.standard_normal(shape), sigma)
    dy = smooth_array(rng.standard_normal(shape), sigma)
    peak = np.sqrt(dx * dx + dy * dy).max()
    return DisplacementField(dx * max_disp / peak, dy * max_disp / peak)


def make_moving(fixed: ScalarImage, truth: TotalTransform) -> ScalarImage:
    """``moving(y) = fixed(A(y + v(y)))`` with clamped bilinear reads."""
    h, w = fixed.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    x, y = truth.apply(xx, yy)
    return ScalarImage(sample_bilinear(fixed.data, x, y))


def invert_points(truth: TotalTransform, points: np.ndarray, iters: int = 200,
                  tol: float = 1e-12) -> np.ndarray:
    """Solve ``A(y + v(y)) = x`` for each row ``x`` of ``points`` by fixed-point iteration."""
    A = truth.affine
    inv = np.linalg.inv(A.matrix)
    rel = np.asarray(points, dtype=np.float64) - np.array([A.cx + A.tx, A.cy + A.ty])
    z = rel @ inv.T + np.array([A.cx, A.cy])
    y = z.copy()
    for _ in range(iters):
        vx = sample_bilinear(truth.field.dx, y[:, 0], y[:, 1])
        vy = sample_bilinear(truth.field.dy, y[:, 0], y[:, 1])
        nxt = z - np.column_stack([vx, vy])
        done = np.max(np.abs(nxt - y)) < tol
        y = nxt
        if done:
            break
    return y


def grid_landmarks(shape, n: int = 10, margin: float = 0.2) -> LandmarkSet:
    h, w = shape
    xs = np.linspace(margin * (w - 1), (1 - margin) * (w - 1), n)
    ys = np.linspace(margin * (h - 1), (1 - margin) * (h - 1), n)
    gx, gy = np.meshgrid(xs, ys)
    return LandmarkSet(np.column_stack([gx.ravel(), gy.ravel()]))


def synthetic_case(size: int = 256, seed: int = 0, angle_deg: float = 15.0,
                   translation=(10.0, -7.0), max_disp: float = 8.0, field_sigma: float = 12.0):
    """Fixed texture, moving image, ground-truth transform and paired landmarks.

    Returns ``(fixed, moving, truth, fixed_landmarks, moving_landmarks)``; the
    moving landmarks are where the fixed landmarks appear in the moving image.
    """
    fixed = smooth_noise_texture(size, seed)
    c = (size - 1) / 2.0
    A = AffineTransform2D.rigid(math.radians(angle_deg), translation[0], translation[1], c, c)
    truth = TotalTransform(A, random_smooth_field((size, size), max_disp, field_sigma, seed + 1))
    moving = make_moving(fixed, truth)
    fixed_lm = grid_landmarks((size, size))
    moving_lm = LandmarkSet(invert_points(truth, fixed_lm.points))
    return fixed, moving, truth, fixed_lm, moving_lm
