"""Gaussian smoothing, anti-aliased decimation and image pyramids."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import DisplacementField, ScalarImage, check_factors


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled Gaussian truncated at ``ceil(4 sigma)`` and renormalized to sum 1."""
    radius = max(1, int(math.ceil(4.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth_array(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian over the last two axes with edge replication."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    arr = np.asarray(arr, dtype=np.float64)
    if sigma == 0:
        return arr.copy()
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(arr, k, axis=-1, mode="nearest")
    return ndimage.correlate1d(out, k, axis=-2, mode="nearest")


def gaussian_smooth(img: ScalarImage, sigma: float) -> ScalarImage:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img
    return ScalarImage(smooth_array(img.data, sigma))


def smooth_field(field: DisplacementField, sigma: float) -> DisplacementField:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return field
    return DisplacementField(smooth_array(field.dx, sigma), smooth_array(field.dy, sigma))


def downsample_array(arr: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"downsample factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    if factor == 1:
        return np.asarray(arr, dtype=np.float64).copy()
    return smooth_array(arr, factor / 2.0)[..., ::factor, ::factor]


def downsample(img: ScalarImage, factor: int) -> ScalarImage:
    """Anti-alias with sigma = factor/2, then keep every ``factor``-th pixel from (0, 0)."""
    if factor == 1:
        return img
    return ScalarImage(downsample_array(img.data, factor))


@dataclass(frozen=True)
class Pyramid:
    levels: tuple[ScalarImage, ...]
    factors: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.levels)

    def __iter__(self):
        return iter(zip(self.factors, self.levels))


def build_pyramid(img: ScalarImage, factors) -> Pyramid:
    factors = tuple(factors)
    check_factors(factors)
    return Pyramid(tuple(downsample(img, f) for f in factors), factors)


def level_shape(shape: tuple[int, int], factor: int) -> tuple[int, int]:
    return (-(-shape[0] // factor), -(-shape[1] // factor))

