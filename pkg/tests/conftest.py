from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from sampnet.annotations import write_annotations
from sampnet.datamodel import AnnotatedImage, FeatureMap, FeatureSource, ModelConfig, SynthFamily, SynthSpec
from sampnet.fileformats import write_feature_array, write_feature_file
from sampnet.synth import synth_generate


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def small_config() -> ModelConfig:
    return ModelConfig(channels=8, height=7, width=7, c_prime=16)


@pytest.fixture
def stem_config() -> ModelConfig:
    # 72 px inputs end on a 3 x 3 grid
    return ModelConfig(channels=8, height=3, width=3, c_prime=16,
                       feature_source=FeatureSource.TOY_STEM, image_size=72)


@pytest.fixture
def tiny_spec() -> SynthSpec:
    return SynthSpec(
        families=(SynthFamily('thirds-aligned', 3), SynthFamily('off-balance', 3)),
        image_size=56,
    )


@pytest.fixture
def synth_dir(tmp_path: Path, tiny_spec: SynthSpec) -> Path:
    root = tmp_path / 'synth'
    synth_generate(tiny_spec, 0, root)
    return root


@pytest.fixture
def feature_dir(tmp_path: Path, small_config: ModelConfig, rng: np.random.Generator) -> Path:
    """
    Eight path-less records with precomputed features and saliency sidecars.
    """
    root = tmp_path / 'features'
    images = []
    for index in range(8):
        image = make_image(f'f{index}', tuple(int(s) for s in rng.integers(1, 6, size=5)), ('thing',))
        images.append(image)
        features = rng.uniform(0.0, 1.0, size=(small_config.channels, small_config.height, small_config.width))
        write_feature_file(FeatureMap(features), root / f'{image.image_id}.feat')
        saliency = rng.uniform(0.0, 1.0, size=(1, small_config.saliency_height, small_config.saliency_width))
        write_feature_array(saliency, root / f'{image.image_id}.sal.feat')
    write_annotations(images, root / 'annotations.tsv')
    return root


def make_image(image_id: str, scores: tuple[int, ...], categories: tuple[str, ...] = ()) -> AnnotatedImage:
    return AnnotatedImage(
        image_id=image_id,
        scores=scores,
        attributes=(0.1, -0.2, 0.3, 0.0, 0.5),
        categories=categories,
    )
