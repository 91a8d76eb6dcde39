from __future__ import annotations

import os
import shutil
from dataclasses import dataclass, replace
from logging import getLogger
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import polars as pl
from PIL import Image

from sampnet.annotations import load_annotations, write_annotations
from sampnet.bias import bin_index
from sampnet.consts import ANNOTATIONS_FILENAME, BETAS_FILENAME, FEATURE_SUFFIX, NUM_BINS, SALIENCY_SUFFIX
from sampnet.datamodel import AnnotatedImage, FeatureMap, FeatureSource, ModelConfig, SaliencyGrid
from sampnet.errors import ValidationError
from sampnet.fileformats import read_feature_array, read_feature_file
from sampnet.inner_types import TrackerFactory, default_tracker
from sampnet.saliency import SaliencyMap, downsample_max, spectral_residual
from sampnet.utils import atomic_open, resolve_relative


log = getLogger(__name__)


@dataclass(frozen=True)
class CompositionDataset:
    root: Path
    images: tuple[AnnotatedImage, ...]
    betas: Mapping[str, float] | None = None

    @classmethod
    def from_directory(cls, root: Path | str) -> CompositionDataset:
        root = Path(root)
        annotations_path = root / ANNOTATIONS_FILENAME
        if not annotations_path.is_file():
            raise ValidationError(f"No {ANNOTATIONS_FILENAME} in '{root}'")
        betas_path = root / BETAS_FILENAME
        betas = read_betas(betas_path) if betas_path.is_file() else None
        return cls(root, tuple(load_annotations(annotations_path)), betas)

    def __len__(self) -> int:
        return len(self.images)

    def take(self, indices: Iterable[int]) -> CompositionDataset:
        return replace(self, images=tuple(self.images[index] for index in indices))

    def image_file(self, image: AnnotatedImage) -> Path | None:
        if image.image_path is None:
            return None
        return resolve_relative(image.image_path, self.root)

    def _sidecar(self, image: AnnotatedImage, suffix: str) -> Path:
        image_file = self.image_file(image)
        if image_file is None:
            return self.root / f"{image.image_id}{suffix}"
        return image_file.with_name(image_file.stem + suffix)

    def feature_path(self, image: AnnotatedImage) -> Path:
        return self._sidecar(image, FEATURE_SUFFIX)

    def saliency_path(self, image: AnnotatedImage) -> Path:
        return self._sidecar(image, SALIENCY_SUFFIX)

    def beta_array(self) -> np.ndarray:
        if self.betas is None:
            raise ValidationError(f"Dataset '{self.root}' has no {BETAS_FILENAME}; run prepare first")
        missing = [image.image_id for image in self.images if image.image_id not in self.betas]
        if missing:
            raise ValidationError(f"No beta weight for image '{missing[0]}'")
        return np.array([self.betas[image.image_id] for image in self.images], dtype=np.float64)

    def to_frame(self) -> pl.DataFrame:
        return pl.DataFrame(
            {
                'image_id': [image.image_id for image in self.images],
                'mean_score': [image.mean_score for image in self.images],
                'categories': [list(image.categories) for image in self.images],
                'image_path': [image.image_path for image in self.images],
            },
            schema={
                'image_id': pl.String, 'mean_score': pl.Float64,
                'categories': pl.List(pl.String), 'image_path': pl.String,
            },
        )


def load_image(path: Path | str, size: int | None = None) -> np.ndarray:
    """
    H x W x 3 uint8 raster, optionally resized to a size x size square.
    """
    try:
        with Image.open(path) as image:
            rgb = image.convert('RGB')
    except OSError as exc:
        raise ValidationError(f"Cannot read image '{path}': {exc}") from exc
    if size is not None and rgb.size != (size, size):
        rgb = rgb.resize((size, size), Image.Resampling.BILINEAR)
    return np.asarray(rgb, dtype=np.uint8)


@dataclass(frozen=True, eq=False)
class Batch:
    inputs: np.ndarray
    grids: np.ndarray
    distributions: np.ndarray
    attributes: np.ndarray
    betas: np.ndarray


@dataclass(frozen=True, eq=False)
class DatasetArrays:
    """
    Everything the model consumes, stacked along the sample axis. Toy-stem
    images stay uint8 until a batch is cut.
    """
    config: ModelConfig
    image_ids: tuple[str, ...]
    inputs: np.ndarray
    grids: np.ndarray
    distributions: np.ndarray
    attributes: np.ndarray
    betas: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def take(self, indices: np.ndarray | Sequence[int]) -> DatasetArrays:
        indices = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            image_ids=tuple(self.image_ids[index] for index in indices),
            inputs=self.inputs[indices],
            grids=self.grids[indices],
            distributions=self.distributions[indices],
            attributes=self.attributes[indices],
            betas=self.betas[indices],
        )

    def batch(self, indices: np.ndarray | Sequence[int]) -> Batch:
        indices = np.asarray(indices, dtype=np.int64)
        inputs = self.inputs[indices]
        if self.config.feature_source is FeatureSource.TOY_STEM:
            inputs = inputs.astype(np.float64) / 255.0
        else:
            inputs = inputs.astype(np.float64)
        return Batch(
            inputs=inputs,
            grids=self.grids[indices],
            distributions=self.distributions[indices],
            attributes=self.attributes[indices],
            betas=self.betas[indices],
        )


def _saliency_for(dataset: CompositionDataset,
                  image: AnnotatedImage,
                  config: ModelConfig,
                  raster: np.ndarray | None,
                  ) -> SaliencyGrid:
    sidecar = dataset.saliency_path(image)
    if sidecar.is_file():
        stored = read_feature_array(sidecar)
        if stored.shape[0] != 1:
            raise ValidationError(f"Saliency file '{sidecar}' must hold one channel, got {stored.shape[0]}")
        saliency_map = SaliencyMap(np.clip(stored[0].astype(np.float64), 0.0, 1.0))
    else:
        if raster is None:
            image_file = dataset.image_file(image)
            if image_file is None:
                raise ValidationError(f"Image '{image.image_id}' has neither an image path nor a saliency file")
            raster = load_image(image_file)
        saliency_map = spectral_residual(raster)
    return downsample_max(saliency_map, config.saliency_height, config.saliency_width)


def load_arrays(dataset: CompositionDataset,
                config: ModelConfig,
                *,
                require_betas: bool = False,
                tracker: TrackerFactory = default_tracker,
                ) -> DatasetArrays:
    if not len(dataset):
        raise ValidationError(f"Dataset '{dataset.root}' is empty")
    inputs, grids = [], []
    for image in tracker(dataset.images, desc="loading", total=len(dataset)):
        raster: np.ndarray | None = None
        if config.feature_source is FeatureSource.TOY_STEM:
            image_file = dataset.image_file(image)
            if image_file is None:
                raise ValidationError(f"Image '{image.image_id}' has no image path; the toy stem needs pixels")
            raster = load_image(image_file)
            resized = raster
            if raster.shape[:2] != (config.image_size, config.image_size):
                resized = load_image(image_file, config.image_size)
            inputs.append(np.transpose(resized, (2, 0, 1))[:config.image_channels])
        else:
            features = read_feature_file(dataset.feature_path(image))
            _check_features(features, config, image)
            inputs.append(features.data)
        grids.append(_saliency_for(dataset, image, config, raster).data)

    betas = dataset.beta_array() if require_betas else np.ones(len(dataset))
    arrays = DatasetArrays(
        config=config,
        image_ids=tuple(image.image_id for image in dataset.images),
        inputs=np.stack(inputs),
        grids=np.stack(grids),
        distributions=np.stack([image.distribution.probs for image in dataset.images]),
        attributes=np.array([image.attributes for image in dataset.images], dtype=np.float64),
        betas=betas,
    )
    log.info("Loaded arrays of %s images from '%s'", len(arrays), dataset.root)
    return arrays


def _check_features(features: FeatureMap, config: ModelConfig, image: AnnotatedImage) -> None:
    expected = (config.channels, config.height, config.width)
    if features.data.shape != expected:
        raise ValidationError(
            f"Features of '{image.image_id}' have shape {features.data.shape}, model expects {expected}"
        )


@dataclass(frozen=True)
class ScoreSummary:
    count: int
    mean: float
    variance: float
    bins: tuple[int, ...]


def describe_scores(images: Sequence[AnnotatedImage]) -> ScoreSummary:
    if not images:
        raise ValidationError("Cannot describe an empty set of images")
    means = np.array([image.mean_score for image in images])
    bins = np.bincount([bin_index(mean) for mean in means], minlength=NUM_BINS)
    return ScoreSummary(
        count=len(images),
        mean=float(means.mean()),
        variance=float(means.var()),
        bins=tuple(int(count) for count in bins),
    )


def format_score_summary(summary: ScoreSummary) -> str:
    bins = " ".join(f"[{m + 1},{m + 2}{']' if m == NUM_BINS - 1 else ')'}={count}" for m, count in enumerate(summary.bins))
    return f"{summary.count} images, mean score {summary.mean:.4f}, variance {summary.variance:.4f}; bins {bins}"


def read_betas(path: Path | str) -> dict[str, float]:
    frame = pl.read_csv(path, schema={'image_id': pl.String, 'beta': pl.Float64})
    if frame['beta'].null_count() or (frame['beta'] <= 0).any():
        raise ValidationError(f"'{path}' holds missing or non-positive beta weights")
    return dict(zip(frame['image_id'].to_list(), frame['beta'].to_list()))


def write_betas(betas: Mapping[str, float], path: Path | str, *, allow_overwrite: bool = True) -> None:
    frame = pl.DataFrame(
        {'image_id': list(betas), 'beta': [float(beta) for beta in betas.values()]},
        schema={'image_id': pl.String, 'beta': pl.Float64},
    )
    with atomic_open(path, allow_overwrite=allow_overwrite) as file:
        frame.write_csv(file)


def write_split(source: CompositionDataset, images: Sequence[AnnotatedImage], target_directory: Path) -> None:
    """
    Writes ``annotations.tsv`` for a split, with image paths re-based onto
    ``target_directory``. Sidecar files of path-less images are copied along.
    """
    target_directory.mkdir(parents=True, exist_ok=True)
    rebased = []
    for image in images:
        if image.image_path is None:
            for sidecar in (source.feature_path(image), source.saliency_path(image)):
                if sidecar.is_file():
                    shutil.copyfile(sidecar, target_directory / sidecar.name)
            rebased.append(image)
            continue
        absolute = resolve_relative(image.image_path, source.root)
        relative = os.path.relpath(absolute, target_directory.resolve())
        rebased.append(replace(image, image_path=Path(relative).as_posix()))
    write_annotations(rebased, target_directory / ANNOTATIONS_FILENAME)
