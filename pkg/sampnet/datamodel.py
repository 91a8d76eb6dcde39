from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Any, Sequence

import numpy as np
from adaptix import P, Retort, dumper, loader

from sampnet.consts import ALL_PATTERNS, NUM_ATTRIBUTES, NUM_SCORES, SALIENCY_SCALE
from sampnet.errors import AnnotationError, ValidationError


class FeatureSource(Enum):
    PRECOMPUTED = "precomputed"
    TOY_STEM = "toy_stem"

    @classmethod
    def from_name(cls, name: str) -> FeatureSource:
        try:
            return cls(name)
        except ValueError:
            raise ValidationError(f"Unknown feature source '{name}'")


@dataclass(frozen=True)
class AnnotatedImage:
    image_id: str
    scores: tuple[int, ...]
    attributes: tuple[float, ...]
    categories: tuple[str, ...] = ()
    image_path: str | None = None

    @cached_property
    def mean_score(self) -> float:
        return mean_score(self.scores)

    @cached_property
    def distribution(self) -> ScoreDistribution:
        return score_histogram(self.scores)

    def validate(self, *, line: int | None = None) -> AnnotatedImage:
        if not self.image_id:
            raise AnnotationError("image_id is empty", line=line, field='image_id')
        _check_scores(self.scores, line=line)
        if len(self.attributes) != NUM_ATTRIBUTES:
            raise AnnotationError(
                f"expected {NUM_ATTRIBUTES} attributes, got {len(self.attributes)}", line=line, field='attributes'
            )
        for value in self.attributes:
            if not math.isfinite(value) or not -1.0 <= value <= 1.0:
                raise AnnotationError(f"attribute {value!r} outside [-1, 1]", line=line, field='attributes')
        for category in self.categories:
            if not category.strip():
                raise AnnotationError("empty category name", line=line, field='categories')
        return self


@dataclass(frozen=True, eq=False)
class ScoreDistribution:
    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.shape != (NUM_SCORES,):
            raise ValidationError(f"Score distribution needs {NUM_SCORES} entries, got shape {probs.shape}")
        if not np.all(np.isfinite(probs)) or np.any(probs < 0):
            raise ValidationError(f"Score distribution has negative or non-finite entries: {probs}")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ValidationError(f"Score distribution sums to {probs.sum()!r}, not 1")
        object.__setattr__(self, 'probs', probs)

    @property
    def mean(self) -> float:
        return expectation(self.probs)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ScoreDistribution):
            return NotImplemented
        return bool(np.array_equal(self.probs, other.probs))


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """
    C x H x W activations in channel-major layout.
    """
    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValidationError(f"Feature map must be C x H x W, got shape {data.shape}")
        if data.shape[1] < 3 or data.shape[2] < 3:
            raise ValidationError(f"Feature map grid {data.shape[1]}x{data.shape[2]} is smaller than 3x3")
        if not np.all(np.isfinite(data)):
            raise ValidationError("Feature map contains non-finite values")
        object.__setattr__(self, 'data', data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class SaliencyGrid:
    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.size == 0:
            raise ValidationError(f"Saliency grid must be a non-empty 2-d array, got shape {data.shape}")
        if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0:
            raise ValidationError("Saliency grid values must lie in [0, 1]")
        object.__setattr__(self, 'data', data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def check_pairs_with(self, features: FeatureMap) -> None:
        expected = (SALIENCY_SCALE * features.height, SALIENCY_SCALE * features.width)
        if self.data.shape != expected:
            raise ValidationError(f"Saliency grid {self.data.shape} does not pair with feature grid, expected {expected}")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    height: int = 7
    width: int = 7
    c_prime: int = 256
    patterns: tuple[int, ...] = ALL_PATTERNS
    num_scores: int = NUM_SCORES
    num_attributes: int = NUM_ATTRIBUTES
    use_saliency: bool = True
    use_pattern_weights: bool = True
    use_attribute_branch: bool = True
    use_attention_fusion: bool = True
    feature_source: FeatureSource = FeatureSource.PRECOMPUTED
    image_size: int = 224
    image_channels: int = 3

    @property
    def num_patterns(self) -> int:
        return len(self.patterns)

    @property
    def saliency_height(self) -> int:
        return SALIENCY_SCALE * self.height

    @property
    def saliency_width(self) -> int:
        return SALIENCY_SCALE * self.width

    @property
    def half(self) -> int:
        return self.c_prime // 2

    def validate(self) -> ModelConfig:
        if self.channels < 1:
            raise ValidationError(f"channels must be positive, got {self.channels}")
        if self.height < 3 or self.width < 3:
            raise ValidationError(f"Feature grid {self.height}x{self.width} is smaller than 3x3")
        if self.c_prime < 2 or self.c_prime % 2:
            raise ValidationError(f"c_prime must be a positive even number, got {self.c_prime}")
        if not self.patterns or len(set(self.patterns)) != len(self.patterns):
            raise ValidationError(f"patterns must be a non-empty tuple of distinct ids, got {self.patterns}")
        unknown = [p for p in self.patterns if p not in ALL_PATTERNS]
        if unknown:
            raise ValidationError(f"Unknown pattern ids: {unknown}")
        if self.num_scores != NUM_SCORES or self.num_attributes != NUM_ATTRIBUTES:
            raise ValidationError("Score and attribute counts are fixed at 5")
        if self.feature_source is FeatureSource.TOY_STEM:
            from sampnet.stem import stem_output_size
            side = stem_output_size(self.image_size)
            if (self.height, self.width) != (side, side):
                raise ValidationError(
                    f"Toy stem maps {self.image_size}px images to {side}x{side}, "
                    f"config declares {self.height}x{self.width}"
                )
        return self

    def digest(self) -> str:
        payload = json.dumps(dump_model_config(self), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()


def _check_scores(scores: Sequence[int], *, line: int | None = None) -> None:
    if len(scores) != NUM_SCORES:
        raise AnnotationError(f"expected {NUM_SCORES} scores, got {len(scores)}", line=line, field='scores')
    for score in scores:
        if isinstance(score, bool) or int(score) != score or not 1 <= score <= NUM_SCORES:
            raise AnnotationError(f"score {score!r} outside 1..{NUM_SCORES}", line=line, field='scores')


def expectation(probs: np.ndarray) -> float:
    levels = np.arange(1, len(probs) + 1, dtype=np.float64)
    return float(np.dot(levels, probs))


def score_histogram(scores: Sequence[int]) -> ScoreDistribution:
    _check_scores(scores)
    counts = np.bincount(np.asarray(scores, dtype=np.int64) - 1, minlength=NUM_SCORES)
    return ScoreDistribution(counts / len(scores))


def mean_score(scores: Sequence[int]) -> float:
    return score_histogram(scores).mean


def _split_csv(data: str) -> list[str]:
    return [item.strip() for item in data.split(',')] if data.strip() else []


def _join_csv(values: Sequence[Any]) -> str:
    return ",".join(str(value) for value in values)


_record_retort = Retort(
    recipe=[
        loader(P[AnnotatedImage].scores, lambda data: tuple(int(item) for item in _split_csv(data))),
        loader(P[AnnotatedImage].attributes, lambda data: tuple(float(item) for item in _split_csv(data))),
        loader(P[AnnotatedImage].categories, lambda data: tuple(_split_csv(data))),
        loader(P[AnnotatedImage].image_path, lambda data: data or None),
        dumper(P[AnnotatedImage].scores, _join_csv),
        dumper(P[AnnotatedImage].attributes, lambda values: ",".join(repr(float(v)) for v in values)),
        dumper(P[AnnotatedImage].categories, _join_csv),
        dumper(P[AnnotatedImage].image_path, lambda data: data or ""),
    ],
)
_config_retort = Retort()


def load_annotated_image(data: dict[str, str]) -> AnnotatedImage:
    return _record_retort.load(data, AnnotatedImage)


def dump_annotated_image(image: AnnotatedImage) -> dict[str, str]:
    return _record_retort.dump(image, AnnotatedImage)


def load_model_config(data: dict[str, Any]) -> ModelConfig:
    return _config_retort.load(data, ModelConfig).validate()


def dump_model_config(config: ModelConfig) -> dict[str, Any]:
    return _config_retort.dump(config, ModelConfig)


@dataclass(frozen=True)
class SynthFamily:
    name: str
    count: int


@dataclass(frozen=True)
class PlantedBias:
    """
    A content category whose images are drawn with a tinted object and whose
    scores follow ``law`` with probability ``strength`` regardless of layout.
    """
    category: str
    fraction: float = 0.3
    strength: float = 0.9
    law: tuple[float, ...] = (0.0, 0.0, 0.05, 0.35, 0.60)


@dataclass(frozen=True)
class SynthSpec:
    families: tuple[SynthFamily, ...]
    image_size: int = 224
    score_laws: dict[str, tuple[float, ...]] = field(default_factory=dict)
    planted_bias: PlantedBias | None = None


def load_synth_spec(data: dict[str, Any]) -> SynthSpec:
    return _config_retort.load(data, SynthSpec)


def dump_synth_spec(spec: SynthSpec) -> dict[str, Any]:
    return _config_retort.dump(spec, SynthSpec)
