"""
Toy convolutional stem standing in for a pretrained backbone.

Five 3x3 convolutions, stride 2, zero padding 1, each followed by ReLU.
A side of n pixels maps to ceil(n / 2), so 224 px images end on a 7 x 7 grid.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from sampnet.consts import STEM_WIDTHS
from sampnet.datamodel import ModelConfig
from sampnet.errors import ValidationError


STEM_LAYERS = len(STEM_WIDTHS) + 1


def stem_output_size(image_size: int) -> int:
    size = image_size
    for _ in range(STEM_LAYERS):
        size = (size - 1) // 2 + 1
    return size


def stem_channels(config: ModelConfig) -> list[tuple[int, int]]:
    widths = (*STEM_WIDTHS, config.channels)
    inputs = (config.image_channels, *widths[:-1])
    return list(zip(inputs, widths))


def stem_param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for layer, (fan_in, fan_out) in enumerate(stem_channels(config), start=1):
        shapes[f'stem.{layer}.w'] = (fan_out, fan_in, 3, 3)
        shapes[f'stem.{layer}.b'] = (fan_out,)
    return shapes


def _windows(padded: np.ndarray) -> np.ndarray:
    return sliding_window_view(padded, (3, 3), axis=(2, 3))[:, :, ::2, ::2]


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    patches = _windows(padded)
    out = np.einsum('nchwij,ocij->nohw', patches, weight, optimize=True)
    out += bias[None, :, None, None]
    return out, patches


def conv2d_backward(grad_out: np.ndarray,
                    patches: np.ndarray,
                    weight: np.ndarray,
                    input_shape: tuple[int, ...],
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    grad_weight = np.einsum('nchwij,nohw->ocij', patches, grad_out, optimize=True)
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_patches = np.einsum('nohw,ocij->nchwij', grad_out, weight, optimize=True)
    n, c, height, width = input_shape
    out_height, out_width = grad_out.shape[2:]
    grad_padded = np.zeros((n, c, height + 2, width + 2))
    for i in range(3):
        for j in range(3):
            grad_padded[:, :, i:i + 2 * out_height - 1:2, j:j + 2 * out_width - 1:2] += grad_patches[..., i, j]
    return grad_padded[:, :, 1:-1, 1:-1], grad_weight, grad_bias


@dataclass
class StemCache:
    images: np.ndarray
    layer_inputs: list[np.ndarray]
    patches: list[np.ndarray]
    pre_activations: list[np.ndarray]


def toy_stem_forward(images: np.ndarray,
                     params: Mapping[str, np.ndarray],
                     config: ModelConfig,
                     ) -> tuple[np.ndarray, StemCache]:
    """
    Maps a batch of N x channels x size x size images in [0, 1] to N x C x H x W features.
    """
    expected = (config.image_channels, config.image_size, config.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ValidationError(f"Toy stem expects images of shape (N, {', '.join(map(str, expected))}), got {images.shape}")
    cache = StemCache(images=images, layer_inputs=[], patches=[], pre_activations=[])
    x = images.astype(np.float64, copy=False)
    for layer in range(1, STEM_LAYERS + 1):
        cache.layer_inputs.append(x)
        z, patches = conv2d_forward(x, params[f'stem.{layer}.w'], params[f'stem.{layer}.b'])
        cache.patches.append(patches)
        cache.pre_activations.append(z)
        x = np.maximum(z, 0.0)
    return x, cache


def toy_stem_backward(grad_features: np.ndarray,
                      cache: StemCache,
                      params: Mapping[str, np.ndarray],
                      ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    grads: dict[str, np.ndarray] = {}
    grad = grad_features
    for layer in range(STEM_LAYERS, 0, -1):
        grad = grad * (cache.pre_activations[layer - 1] > 0)
        layer_input = cache.layer_inputs[layer - 1]
        grad, grads[f'stem.{layer}.w'], grads[f'stem.{layer}.b'] = conv2d_backward(
            grad, cache.patches[layer - 1], params[f'stem.{layer}.w'], layer_input.shape,
        )
    return grad, grads
