"""Building the working image pair.

Pipeline per image: optional stain removal, inverted luminance, anti-aliased
downsampling by the resample factor, then both images are padded to a common
size and surrounded by a margin of four NCC kernels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RegistrationParams, RgbImage, ScalarImage
from .filters import downsample
from .stains import DAB_INDEX, StainMatrix, load_stain_matrix, remove_stain

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Provenance:
    """Where each input landed in the working frame.

    An input pixel ``p`` (full resolution) sits at ``p / resample_factor + offset``.
    """

    resample_factor: int
    fixed_offset: tuple[int, int]
    moving_offset: tuple[int, int]
    fixed_size: tuple[int, int]
    moving_size: tuple[int, int]

    def to_working(self, points: np.ndarray, role: str = "fixed") -> np.ndarray:
        off = np.array(self.fixed_offset if role == "fixed" else self.moving_offset, dtype=np.float64)
        return np.asarray(points, dtype=np.float64) / self.resample_factor + off

    def from_working(self, points: np.ndarray, role: str = "moving") -> np.ndarray:
        off = np.array(self.fixed_offset if role == "fixed" else self.moving_offset, dtype=np.float64)
        return (np.asarray(points, dtype=np.float64) - off) * self.resample_factor


@dataclass(frozen=True, eq=False)
class PreprocessedPair:
    fixed: ScalarImage
    moving: ScalarImage
    mask: np.ndarray
    k: int
    provenance: Provenance

    @property
    def shape(self) -> tuple[int, int]:
        return self.fixed.shape


def to_grayscale(img: RgbImage | ScalarImage) -> ScalarImage:
    """Inverted luminance: white background -> 0, dark tissue -> 1.

    Grayscale inputs are treated as R = G = B and only inverted.
    """
    if isinstance(img, ScalarImage):
        return ScalarImage(1.0 - img.data)
    y = (img.data.astype(np.float64) @ LUMA) / 255.0
    return ScalarImage(np.clip(1.0 - y, 0.0, 1.0))


def compute_kernel_size(fixed: ScalarImage, S: float) -> int:
    if S < 1:
        raise ValueError(f"ncc scale must be >= 1, got {S}")
    return max(1, int(np.floor(min(fixed.width, fixed.height) / S)))


def corner_mean(img: ScalarImage) -> float:
    d = img.data
    return float((d[0, 0] + d[0, -1] + d[-1, 0] + d[-1, -1]) / 4.0)


def boundary_mask(shape: tuple[int, int], k: int) -> np.ndarray:
    """1 on pixels at least ``k`` pixels away from every image edge."""
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    mask[k:h - k, k:w - k] = True
    return mask


def _pad(img: ScalarImage, top: int, bottom: int, left: int, right: int, fill: float) -> ScalarImage:
    return ScalarImage(np.pad(img.data, ((top, bottom), (left, right)), constant_values=fill))


def pad_and_center(fixed: ScalarImage, moving: ScalarImage, k: int,
                   resample_factor: int = 1) -> PreprocessedPair:
    if k < 1:
        raise ValueError(f"kernel size must be >= 1, got {k}")
    H = max(fixed.height, moving.height)
    W = max(fixed.width, moving.width)
    margin = 4 * k
    padded = []
    offsets = []
    for img in (fixed, moving):
        fill = corner_mean(img)
        dh, dw = H - img.height, W - img.width
        top, left = dh // 2 + margin, dw // 2 + margin
        bottom, right = dh - dh // 2 + margin, dw - dw // 2 + margin
        padded.append(_pad(img, top, bottom, left, right, fill))
        offsets.append((left, top))
    prov = Provenance(resample_factor, offsets[0], offsets[1],
                      (fixed.width, fixed.height), (moving.width, moving.height))
    return PreprocessedPair(padded[0], padded[1], boundary_mask(padded[0].shape, k), k, prov)


def prepare_pair(fixed_img: RgbImage | ScalarImage, moving_img: RgbImage | ScalarImage,
                 params: RegistrationParams, deconv: tuple[bool, bool] = (False, False),
                 stain_matrix: StainMatrix | None = None) -> PreprocessedPair:
    """Full preprocessing of a raw pair; ``deconv`` flags DAB removal per (fixed, moving)."""
    f = params.resample_factor
    working = []
    for img, remove in zip((fixed_img, moving_img), deconv):
        if remove:
            if not isinstance(img, RgbImage):
                raise ValueError("stain removal needs a colour image")
            img = remove_stain(img, stain_matrix or load_stain_matrix(), DAB_INDEX)
        working.append(downsample(to_grayscale(img), f))
    k = compute_kernel_size(working[0], params.ncc_scale)
    pair = pad_and_center(working[0], working[1], k, resample_factor=f)
    prov = pair.provenance
    full = Provenance(f, prov.fixed_offset, prov.moving_offset,
                      (fixed_img.width, fixed_img.height), (moving_img.width, moving_img.height))
    return PreprocessedPair(pair.fixed, pair.moving, pair.mask, k, full)
