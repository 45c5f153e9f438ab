"""Analytic single-scale Retinex: image = reflectance * illumination."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

EPS = 1e-4


@dataclass
class Decomposition:
    reflectance: np.ndarray  # H x W x 3 in [0, 1]
    illumination: np.ndarray  # H x W x 1 in [EPS, 1]


def default_sigma(shape: Sequence[int]) -> float:
    return min(shape[0], shape[1]) / 16


def estimate_illumination(image: np.ndarray, smoothing_sigma: float) -> np.ndarray:
    bright = np.asarray(image, dtype=np.float64).max(axis=2)
    # reflect boundary keeps the blur symmetric under flips and constant on constants
    blurred = ndimage.gaussian_filter(bright, smoothing_sigma, mode="reflect")
    return np.clip(blurred, EPS, 1.0)[..., None]


def decompose(image: np.ndarray, smoothing_sigma: Optional[float] = None) -> Decomposition:
    """Split ``image`` into reflectance and a smooth illumination map.

    Illumination is the Gaussian-blurred max channel clamped to [EPS, 1];
    reflectance is ``min(image / illumination, 1)`` per channel, so that
    ``reflectance * illumination == min(image, illumination)``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    if smoothing_sigma is None:
        smoothing_sigma = default_sigma(image.shape)
    if not smoothing_sigma > 0:
        raise ValueError(f"smoothing_sigma must be > 0, got {smoothing_sigma}")
    illumination = estimate_illumination(image, smoothing_sigma)
    reflectance = np.minimum(image / illumination, 1.0)
    return Decomposition(reflectance, illumination)


def decompose_batch(images: Sequence[np.ndarray],
                    smoothing_sigma: Optional[float] = None) -> list[Decomposition]:
    out = []
    for i, image in enumerate(images):
        try:
            out.append(decompose(image, smoothing_sigma))
        except ValueError as exc:
            raise ValueError(f"image {i}: {exc}") from exc
    return out


def total_variation(x: np.ndarray) -> float:
    """Anisotropic total variation of a 2-D (or HxWx1) array."""
    x = np.asarray(x, dtype=np.float64).reshape(x.shape[0], x.shape[1])
    return float(np.abs(np.diff(x, axis=0)).sum() + np.abs(np.diff(x, axis=1)).sum())
