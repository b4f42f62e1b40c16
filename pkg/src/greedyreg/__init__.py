"""Greedy diffeomorphic registration of 2D image pairs, with landmark scoring."""

from .core import (AffineTransform2D, DisplacementField, LandmarkSet, RegistrationError,
                   RegistrationParams, RgbImage, ScalarImage, default_params)

__all__ = [
    "AffineTransform2D",
    "DisplacementField",
    "LandmarkSet",
    "RegistrationError",
    "RegistrationParams",
    "RgbImage",
    "ScalarImage",
    "default_params",
]

__version__ = "0.1.0"
