"""
Per-image interpretability artifacts: saliency map, predicted distribution,
pattern weights and an overlay of the dominant pattern's partitions.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from sampnet.consts import FEATURE_SUFFIX, SALIENCY_SUFFIX
from sampnet.datamodel import FeatureSource, expectation
from sampnet.dataset import load_image
from sampnet.errors import ValidationError
from sampnet.fileformats import Checkpoint, read_feature_array, read_feature_file
from sampnet.model import model_forward
from sampnet.patterns import PATTERN_NAMES, PartitionMap, boundary_edges, pattern_mask
from sampnet.saliency import SaliencyMap, downsample_max, spectral_residual
from sampnet.trainer import params_from_checkpoint
from sampnet.utils import atomic_open


log = getLogger(__name__)
OVERLAY_COLOR = (0, 255, 0)


def dominant_pattern(weights: Sequence[float] | np.ndarray, patterns: Sequence[int]) -> int:
    """
    Pattern with the largest weight; ties go to the lowest pattern id.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(patterns),):
        raise ValidationError(f"{weights.size} weights for {len(patterns)} patterns")
    top = weights.max()
    return min(p for p, weight in zip(patterns, weights) if weight == top)


def write_gray_png(values: np.ndarray, path: Path | str) -> None:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValidationError(f"Gray image must be 2-d, got shape {values.shape}")
    pixels = np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    with atomic_open(path, 'wb') as file:
        Image.fromarray(pixels).save(file, format='PNG')


def render_overlay(image: np.ndarray, partition_map: PartitionMap, *, color: tuple[int, int, int] = OVERLAY_COLOR) -> Image.Image:
    """
    Draws the partition boundaries of the feature grid scaled up to the image.
    """
    canvas = Image.fromarray(np.asarray(image, dtype=np.uint8)).convert('RGB')
    draw = ImageDraw.Draw(canvas)
    cell_height = canvas.height / partition_map.height
    cell_width = canvas.width / partition_map.width
    line_width = max(1, min(canvas.size) // 112)
    horizontal, vertical = boundary_edges(partition_map)
    for i, j in zip(*np.nonzero(horizontal)):
        y = (i + 1) * cell_height
        draw.line([(j * cell_width, y), ((j + 1) * cell_width, y)], fill=color, width=line_width)
    for i, j in zip(*np.nonzero(vertical)):
        x = (j + 1) * cell_width
        draw.line([(x, i * cell_height), (x, (i + 1) * cell_height)], fill=color, width=line_width)
    return canvas


@dataclass(frozen=True)
class ImageReport:
    image: str
    distribution: tuple[float, ...]
    expected_score: float
    pattern_weights: dict[int, float]
    dominant_pattern: int
    attention: tuple[float, float]
    overlay_pattern: int

    def as_json(self) -> str:
        payload = {
            'image': self.image,
            'distribution': list(self.distribution),
            'expected_score': self.expected_score,
            'pattern_weights': {str(p): weight for p, weight in self.pattern_weights.items()},
            'dominant_pattern': self.dominant_pattern,
            'attention': list(self.attention),
            'overlay_pattern': self.overlay_pattern,
        }
        return json.dumps(payload, sort_keys=True)

    def format_text(self) -> str:
        lines = [
            f"image           {self.image}",
            f"expected score  {self.expected_score:.4f}",
            "distribution    " + " ".join(f"{value:.4f}" for value in self.distribution),
            f"attention       e1={self.attention[0]:.4f} e2={self.attention[1]:.4f}",
            f"overlay         pattern {self.overlay_pattern} ({PATTERN_NAMES[self.overlay_pattern]})",
        ]
        for p, weight in self.pattern_weights.items():
            marker = '  <- dominant' if p == self.dominant_pattern else ''
            lines.append(f"pattern {p} ({PATTERN_NAMES[p]}): {weight:.4f}{marker}")
        return '\n'.join(lines)


def _sidecar(image_path: Path, suffix: str) -> Path:
    return image_path.with_name(image_path.stem + suffix)


def visualize_image(checkpoint: Checkpoint,
                    image_path: Path | str,
                    out_dir: Path | str,
                    *,
                    pattern: int | None = None,
                    ) -> ImageReport:
    """
    Writes the artifacts for one image. The overlay shows ``pattern`` when
    given, else the dominant pattern.
    """
    if pattern is not None and pattern not in PATTERN_NAMES:
        raise ValidationError(f"Unknown pattern id {pattern}, expected one of {tuple(PATTERN_NAMES)}")
    image_path = Path(image_path)
    out_dir = Path(out_dir)
    params = params_from_checkpoint(checkpoint)
    config = checkpoint.config
    raster = load_image(image_path)

    saliency_file = _sidecar(image_path, SALIENCY_SUFFIX)
    if saliency_file.is_file():
        saliency_map = SaliencyMap(np.clip(read_feature_array(saliency_file)[0].astype(np.float64), 0.0, 1.0))
    else:
        saliency_map = spectral_residual(raster)
    grid = downsample_max(saliency_map, config.saliency_height, config.saliency_width)

    if config.feature_source is FeatureSource.TOY_STEM:
        resized = load_image(image_path, config.image_size)
        inputs = np.transpose(resized, (2, 0, 1))[None, :config.image_channels].astype(np.float64) / 255.0
    else:
        features = read_feature_file(_sidecar(image_path, FEATURE_SUFFIX))
        expected = (config.channels, config.height, config.width)
        if features.data.shape != expected:
            raise ValidationError(f"Features of '{image_path}' have shape {features.data.shape}, model expects {expected}")
        inputs = features.data[None].astype(np.float64)

    outputs, _ = model_forward(params, inputs, grid.data[None])
    distribution = outputs.distribution[0]
    weights = outputs.pattern_weights[0]
    dominant = dominant_pattern(weights, config.patterns)
    overlay_pattern = dominant if pattern is None else pattern
    report = ImageReport(
        image=image_path.name,
        distribution=tuple(float(value) for value in distribution),
        expected_score=expectation(distribution),
        pattern_weights={p: float(weight) for p, weight in zip(config.patterns, weights)},
        dominant_pattern=dominant,
        attention=(float(outputs.attention[0, 0]), float(outputs.attention[0, 1])),
        overlay_pattern=overlay_pattern,
    )

    write_gray_png(saliency_map.values, out_dir / 'saliency.png')
    overlay = render_overlay(raster, pattern_mask(overlay_pattern, config.height, config.width))
    with atomic_open(out_dir / 'overlay.png', 'wb') as file:
        overlay.save(file, format='PNG')
    with atomic_open(out_dir / 'report.json') as file:
        file.write(report.as_json() + '\n')
    with atomic_open(out_dir / 'report.txt') as file:
        file.write(report.format_text() + '\n')
    log.info("Dominant pattern of '%s' is %s (%s)", image_path.name, dominant, PATTERN_NAMES[dominant])
    return report
