"""
Seeded generator of synthetic composition datasets.

Each scene family places one or two objects on a textured background in a
fixed layout; the five scores of an image are drawn from the family's
categorical law and its attributes scatter around the family's centers.
"""
from __future__ import annotations

import json
from logging import getLogger
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from sampnet.annotations import write_annotations
from sampnet.consts import (
    ANNOTATIONS_FILENAME, FAMILY_ATTRIBUTES, FAMILY_SCORE_LAWS, NUM_ATTRIBUTES, NUM_SCORES, SCENE_FAMILIES,
)
from sampnet.datamodel import AnnotatedImage, SynthSpec, dump_synth_spec, load_synth_spec
from sampnet.errors import ValidationError
from sampnet.inner_types import TrackerFactory, default_tracker
from sampnet.utils import atomic_open


log = getLogger(__name__)

IMAGES_DIRECTORY = 'images'
SPEC_FILENAME = 'synth_spec.json'
ATTRIBUTE_NOISE = 0.1
BIAS_TINT = (220, 40, 40)


def _check_law(name: str, law: tuple[float, ...]) -> np.ndarray:
    probs = np.asarray(law, dtype=np.float64)
    if probs.shape != (NUM_SCORES,) or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ValidationError(f"Score law of '{name}' must be {NUM_SCORES} non-negative weights summing to 1")
    return probs


def validate_spec(spec: SynthSpec) -> SynthSpec:
    if not spec.families:
        raise ValidationError("Synthetic spec names no scene families")
    if spec.image_size <= 0:
        raise ValidationError(f"Image size must be positive, got {spec.image_size}")
    seen = set()
    for family in spec.families:
        if family.name not in SCENE_FAMILIES:
            raise ValidationError(f"Unknown scene family '{family.name}'")
        if family.name in seen:
            raise ValidationError(f"Scene family '{family.name}' is listed twice")
        if family.count <= 0:
            raise ValidationError(f"Scene family '{family.name}' has non-positive count {family.count}")
        seen.add(family.name)
    for name, law in spec.score_laws.items():
        if name not in SCENE_FAMILIES:
            raise ValidationError(f"Score law given for unknown family '{name}'")
        _check_law(name, law)
    if spec.planted_bias is not None:
        bias = spec.planted_bias
        if not bias.category.strip() or bias.category in SCENE_FAMILIES:
            raise ValidationError(f"Planted bias category '{bias.category}' must be a new non-empty name")
        if not 0.0 < bias.fraction <= 1.0 or not 0.0 <= bias.strength <= 1.0:
            raise ValidationError("Planted bias fraction must be in (0, 1] and strength in [0, 1]")
        _check_law(bias.category, bias.law)
    return spec


def read_synth_spec(path: Path | str) -> SynthSpec:
    with open(path, encoding='utf-8') as file:
        return validate_spec(load_synth_spec(json.load(file)))


def score_law(spec: SynthSpec, family: str) -> np.ndarray:
    return _check_law(family, spec.score_laws.get(family, FAMILY_SCORE_LAWS[family]))


def _object_boxes(family: str, size: int, rng: np.random.Generator) -> list[tuple[float, float, float]]:
    """
    (center_x, center_y, radius) of every object in the scene, in pixels.
    """
    radius = size * rng.uniform(0.09, 0.13)
    jitter = size * 0.02
    match family:
        case 'thirds-aligned':
            cx = size * (1 / 3 if rng.random() < 0.5 else 2 / 3)
            cy = size * (1 / 3 if rng.random() < 0.5 else 2 / 3)
            centers = [(cx, cy)]
        case 'centered':
            centers = [(size / 2, size / 2)]
        case 'off-balance':
            cx = size * (0.08 if rng.random() < 0.5 else 0.92)
            cy = size * rng.uniform(0.08, 0.3)
            centers = [(cx, cy)]
        case 'symmetric-pair':
            offset = size * rng.uniform(0.2, 0.28)
            centers = [(size / 2 - offset, size / 2), (size / 2 + offset, size / 2)]
        case _:
            raise ValidationError(f"Unknown scene family '{family}'")
    return [
        (cx + rng.uniform(-jitter, jitter), cy + rng.uniform(-jitter, jitter), radius)
        for cx, cy in centers
    ]


def render_scene(family: str, size: int, rng: np.random.Generator, *, tinted: bool = False) -> np.ndarray:
    """
    size x size x 3 uint8 image of one scene of ``family``.
    """
    base = rng.uniform(40, 90, size=3)
    ramp = np.linspace(-15.0, 15.0, size)[:, None, None]
    noise = rng.normal(0.0, 6.0, size=(size, size, 3))
    background = np.clip(base + ramp + noise, 0, 255).astype(np.uint8)
    image = Image.fromarray(background)
    draw = ImageDraw.Draw(image)
    color = BIAS_TINT if tinted else tuple(int(v) for v in rng.integers(170, 250, size=3))
    for cx, cy, radius in _object_boxes(family, size, rng):
        draw.ellipse((cx - radius, cy - radius, cx + radius, cy + radius), fill=color)
    return np.asarray(image)


def _attributes(family: str, rng: np.random.Generator) -> tuple[float, ...]:
    centers = np.asarray(FAMILY_ATTRIBUTES[family])
    values = np.clip(centers + rng.normal(0.0, ATTRIBUTE_NOISE, size=NUM_ATTRIBUTES), -1.0, 1.0)
    return tuple(round(float(value), 4) for value in values)


def _scores(law: np.ndarray, rng: np.random.Generator) -> tuple[int, ...]:
    return tuple(int(score) + 1 for score in rng.choice(NUM_SCORES, size=NUM_SCORES, p=law))


def synth_records(spec: SynthSpec, seed: int) -> list[tuple[AnnotatedImage, np.ndarray]]:
    """
    Generates every (record, image) pair in memory without touching the disk.
    """
    validate_spec(spec)
    rng = np.random.default_rng(seed)
    bias = spec.planted_bias
    records = []
    for family in spec.families:
        law = score_law(spec, family.name)
        for index in range(family.count):
            image_id = f"{family.name}-{index:04d}"
            planted = bias is not None and rng.random() < bias.fraction
            categories: tuple[str, ...] = (family.name,)
            scores_law = law
            if planted:
                assert bias is not None
                categories = (family.name, bias.category)
                if rng.random() < bias.strength:
                    scores_law = _check_law(bias.category, bias.law)
            pixels = render_scene(family.name, spec.image_size, rng, tinted=planted)
            record = AnnotatedImage(
                image_id=image_id,
                scores=_scores(scores_law, rng),
                attributes=_attributes(family.name, rng),
                categories=categories,
                image_path=f"{IMAGES_DIRECTORY}/{image_id}.png",
            ).validate()
            records.append((record, pixels))
    return records


def synth_generate(spec: SynthSpec,
                   seed: int,
                   out_dir: Path | str,
                   *,
                   tracker: TrackerFactory = default_tracker,
                   ) -> list[AnnotatedImage]:
    out_dir = Path(out_dir)
    records = synth_records(spec, seed)
    images_dir = out_dir / IMAGES_DIRECTORY
    images_dir.mkdir(parents=True, exist_ok=True)
    for record, pixels in tracker(records, desc="images", total=len(records)):
        with atomic_open(images_dir / f"{record.image_id}.png", 'wb') as file:
            Image.fromarray(pixels).save(file, format='PNG')
    images = [record for record, _ in records]
    write_annotations(images, out_dir / ANNOTATIONS_FILENAME)
    with atomic_open(out_dir / SPEC_FILENAME) as file:
        json.dump(dump_synth_spec(spec), file, indent=2, sort_keys=True)
        file.write('\n')
    log.info("Wrote %s synthetic images to %s", len(images), out_dir)
    return images
