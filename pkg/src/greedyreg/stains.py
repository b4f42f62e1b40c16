"""Colour deconvolution into stain concentrations and removal of a stain.

Optical density per channel is ``-log10(max(I, 1) / 255)``. Each pixel's OD
row vector is modelled as ``c @ M`` where the rows of ``M`` are unit stain
vectors, so concentrations are ``OD @ inv(M)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .core import RgbImage

DAB_INDEX = 1


@dataclass(frozen=True, eq=False)
class StainMatrix:
    rows: np.ndarray

    def __post_init__(self):
        m = np.array(self.rows, dtype=np.float64)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise ValueError(f"stain matrix must be a finite 3x3 array, got shape {m.shape}")
        norms = np.linalg.norm(m, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError(f"stain vectors must have unit length, norms={norms}")
        if abs(np.linalg.det(m)) <= 1e-6:
            raise ValueError("stain matrix is singular")
        m.setflags(write=False)
        object.__setattr__(self, "rows", m)

    @classmethod
    def from_vectors(cls, rows) -> "StainMatrix":
        m = np.array(rows, dtype=np.float64)
        norms = np.linalg.norm(m, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("stain vector of zero length")
        return cls(m / norms)

    @classmethod
    def from_two(cls, first, second) -> "StainMatrix":
        """Complete two stains with the complementary third colour.

        Each component of the third vector is ``sqrt(1 - a_i**2 - b_i**2)`` (0 when
        negative) for the normalized stains ``a``, ``b``, so it stays non-negative.
        """
        a = np.asarray(first, dtype=np.float64)
        b = np.asarray(second, dtype=np.float64)
        a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
        third = np.sqrt(np.maximum(1.0 - a * a - b * b, 0.0))
        return cls.from_vectors([a, b, third])

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.rows)


def load_stain_matrix(path=None) -> StainMatrix:
    """Read 9 whitespace-separated decimals (row-major); defaults to the shipped H-DAB set."""
    if path is None:
        text = resources.files("greedyreg").joinpath("data/hdab.txt").read_text()
    else:
        text = Path(path).read_text()
    values = []
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        values.extend(float(tok) for tok in line.split())
    if len(values) != 9:
        raise ValueError(f"stain matrix file must hold 9 numbers, found {len(values)}")
    return StainMatrix.from_vectors(np.reshape(values, (3, 3)))


def od_transform(rgb: RgbImage) -> np.ndarray:
    """Per-channel optical density, shape (h, w, 3)."""
    return -np.log10(np.maximum(rgb.data.astype(np.float64), 1.0) / 255.0)


def od_to_rgb(od: np.ndarray) -> RgbImage:
    return RgbImage(np.clip(np.round(255.0 * np.power(10.0, -od)), 0, 255).astype(np.uint8))


def separate(rgb: RgbImage, M: StainMatrix) -> np.ndarray:
    """Raw (unclamped) stain concentrations, shape (h, w, 3)."""
    return od_transform(rgb) @ M.inverse


def combine(concentrations: np.ndarray, M: StainMatrix) -> RgbImage:
    return od_to_rgb(concentrations @ M.rows)


def remove_stain_od(od: np.ndarray, M: StainMatrix, channel_index: int = DAB_INDEX) -> np.ndarray:
    """Optical density with one stain taken out; negative concentrations are clamped to 0."""
    if channel_index not in (0, 1, 2):
        raise ValueError(f"channel_index must be 0, 1 or 2, got {channel_index}")
    c = np.maximum(od @ M.inverse, 0.0)
    c[..., channel_index] = 0.0
    return c @ M.rows


def remove_stain(rgb: RgbImage, M: StainMatrix, channel_index: int = DAB_INDEX) -> RgbImage:
    return od_to_rgb(remove_stain_od(od_transform(rgb), M, channel_index))
