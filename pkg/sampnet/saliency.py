from __future__ import annotations

import math
from dataclasses import dataclass
from logging import getLogger

import numpy as np
from PIL import Image
from scipy import ndimage

from sampnet.consts import SALIENCY_EPS, SALIENCY_RADIUS, SALIENCY_SIGMA, SALIENCY_WORKING_SIZE
from sampnet.datamodel import SaliencyGrid
from sampnet.errors import ValidationError


log = getLogger(__name__)
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, eq=False)
class SaliencyMap:
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.size == 0:
            raise ValidationError(f"Saliency map must be a non-empty 2-d array, got shape {values.shape}")
        if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
            raise ValidationError("Saliency map values must lie in [0, 1]")
        object.__setattr__(self, 'values', values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def to_luminance(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] in (3, 4):
        return image[..., :3].astype(np.float64) @ LUMA_WEIGHTS
    if image.ndim == 2:
        return image.astype(np.float64)
    raise ValidationError(f"Expected a grayscale (H, W) or RGB (H, W, 3) raster, got shape {image.shape}")


def resize_bilinear(values: np.ndarray, height: int, width: int) -> np.ndarray:
    if values.shape == (height, width):
        return values.astype(np.float64, copy=True)
    resized = Image.fromarray(values.astype(np.float32)).resize((width, height), Image.Resampling.BILINEAR)
    return np.asarray(resized, dtype=np.float64)


def normalize_unit(values: np.ndarray) -> np.ndarray:
    low = values.min()
    span = values.max() - low
    if not span > 0:
        return np.zeros_like(values, dtype=np.float64)
    return (values - low) / span


def spectral_residual(image: np.ndarray,
                      *,
                      sigma: float = SALIENCY_SIGMA,
                      radius: int = SALIENCY_RADIUS,
                      working_size: int = SALIENCY_WORKING_SIZE,
                      ) -> SaliencyMap:
    gray = to_luminance(image)
    if gray.size == 0:
        raise ValidationError("Cannot compute saliency of an empty image")
    height, width = gray.shape
    if np.ptp(gray) == 0:
        return SaliencyMap(np.zeros((height, width)))

    small = resize_bilinear(gray, working_size, working_size)
    spectrum = np.fft.fft2(small)
    log_amplitude = np.log(np.abs(spectrum) + SALIENCY_EPS)
    phase = np.angle(spectrum)

    # edge cells average over the neighbours that exist
    neighbour_sum = ndimage.uniform_filter(log_amplitude, size=3, mode='constant', cval=0.0)
    neighbour_count = ndimage.uniform_filter(np.ones_like(log_amplitude), size=3, mode='constant', cval=0.0)
    residual = log_amplitude - neighbour_sum / neighbour_count

    saliency = np.abs(np.fft.ifft2(np.exp(residual + 1j * phase))) ** 2
    saliency = ndimage.gaussian_filter(saliency, sigma=sigma, truncate=radius / sigma)
    saliency = normalize_unit(saliency)

    restored = resize_bilinear(saliency, height, width)
    return SaliencyMap(np.clip(restored, 0.0, 1.0))


def downsample_max(saliency_map: SaliencyMap, height: int, width: int) -> SaliencyGrid:
    if height <= 0 or width <= 0:
        raise ValidationError(f"Saliency grid size must be positive, got {height}x{width}")
    values = saliency_map.values
    if values.shape[0] % height or values.shape[1] % width:
        target_height = math.ceil(values.shape[0] / height) * height
        target_width = math.ceil(values.shape[1] / width) * width
        log.warning(
            "Saliency map %sx%s is not divisible into %sx%s blocks, resizing to %sx%s first",
            *values.shape, height, width, target_height, target_width,
        )
        values = np.clip(resize_bilinear(values, target_height, target_width), 0.0, 1.0)
    block_height = values.shape[0] // height
    block_width = values.shape[1] // width
    pooled = values.reshape(height, block_height, width, block_width).max(axis=(1, 3))
    return SaliencyGrid(pooled)


def saliency_grid(image: np.ndarray, height: int, width: int) -> SaliencyGrid:
    return downsample_max(spectral_residual(image), height, width)
