"""Greedy diffeomorphic refinement over a coarse-to-fine pyramid.

At every iteration the metric gradient of the currently warped moving image is
smoothed with ``sigma_s``, rescaled so its largest vector is ``epsilon_max``
pixels long, composed onto the running field and the result smoothed with
``sigma_t``. The loop starts from the zero field and runs a fixed number of
iterations per level.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import DisplacementField, RegistrationError, RegistrationParams, ScalarImage
from .filters import build_pyramid, smooth_array
from .metric import ncc_array, ncc_gradient, window_radius
from .preprocess import compute_kernel_size
from .warp import compose, jacobian_det, sample_bilinear, warp_array

log = logging.getLogger(__name__)

MIN_LEVEL_SIGMA = 0.25


@dataclass(frozen=True)
class DiffeoResult:
    field: DisplacementField
    per_level_values: tuple[float, ...]
    min_jacobian: float


def resize_field(field: DisplacementField, shape, scale: float) -> DisplacementField:
    """Carry a field onto a grid whose coordinates are ``scale`` times the source grid's."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    x, y = xx / scale, yy / scale
    return DisplacementField(sample_bilinear(field.dx, x, y) * scale,
                             sample_bilinear(field.dy, x, y) * scale)


def level_sigma(sigma: float, factor: int) -> float:
    return max(MIN_LEVEL_SIGMA, sigma / factor)


def greedy_step(fixed: ScalarImage, moving: ScalarImage, phi: DisplacementField, r: int,
                sigma_s: float, sigma_t: float, epsilon_max: float) -> tuple[DisplacementField, float]:
    """One update; returns the new field and the dissimilarity before the update."""
    warped = ScalarImage(warp_array(moving.data, phi.dx, phi.dy))
    zero = DisplacementField(np.zeros(phi.shape), np.zeros(phi.shape))
    report = ncc_gradient(fixed, warped, zero, None, r)
    if not np.isfinite(report.value):
        raise RegistrationError("non-finite NCC value in greedy iteration")
    sx = smooth_array(-report.gradient.dx, sigma_s)
    sy = smooth_array(-report.gradient.dy, sigma_s)
    peak = float(np.sqrt(sx * sx + sy * sy).max())
    if peak == 0.0:
        return phi, report.value
    step = epsilon_max / peak
    psi = DisplacementField(sx * step, sy * step)
    composed = compose(phi, psi)
    return DisplacementField(smooth_array(composed.dx, sigma_t),
                             smooth_array(composed.dy, sigma_t)), report.value


def greedy_register(fixed: ScalarImage, moving: ScalarImage, params: RegistrationParams,
                    k: int | None = None, initial: DisplacementField | None = None) -> DiffeoResult:
    """Deformable registration of ``moving`` (already affinely resampled) onto ``fixed``.

    ``k`` is the NCC kernel size at working resolution. ``initial`` warm-starts
    the coarsest level and must have that level's shape.
    """
    if fixed.shape != moving.shape:
        raise ValueError(f"image shapes differ: {fixed.shape} vs {moving.shape}")
    if k is None:
        k = compute_kernel_size(fixed, params.ncc_scale)
    factors = params.pyramid_factors
    fixed_pyr = build_pyramid(fixed, factors)
    moving_pyr = build_pyramid(moving, factors)

    phi = None
    values = []
    prev_factor = None
    for level, (factor, n_iter) in enumerate(zip(factors, params.iters_per_level)):
        F = fixed_pyr.levels[level]
        M = moving_pyr.levels[level]
        if phi is None:
            if initial is not None:
                if initial.shape != F.shape:
                    raise ValueError(f"initial field shape {initial.shape} != level shape {F.shape}")
                phi = initial
            else:
                phi = DisplacementField(np.zeros(F.shape), np.zeros(F.shape))
        else:
            phi = resize_field(phi, F.shape, prev_factor / factor)
        r = window_radius(k, factor)
        ss = level_sigma(params.sigma_s, factor)
        st = level_sigma(params.sigma_t, factor)
        for _ in range(n_iter):
            phi, _ = greedy_step(F, M, phi, r, ss, st, params.epsilon_max)
        value = ncc_array(F.data, warp_array(M.data, phi.dx, phi.dy), None, r)[0]
        log.info("diffeo level x%d: %d iterations, value %.6f", factor, n_iter, value)
        values.append(value)
        prev_factor = factor

    min_jac = float(jacobian_det(phi).data.min())
    return DiffeoResult(phi, tuple(values), min_jac)
