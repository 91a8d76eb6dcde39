"""
Training configuration and its key-value file format.

    # comment
    batch_size = 16
    model.c_prime = 16
    model.patterns = 1,2,3,4,5,6,7,8
    loss.lambda_ = 0.1
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, fields, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

from adaptix import P, Retort, loader, name_mapping
from adaptix.load_error import LoadError

from sampnet.datamodel import ModelConfig
from sampnet.errors import ValidationError
from sampnet.losses import LossConfig
from sampnet.utils import atomic_open


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr_backbone: float = 1e-6
    lr_head: float = 1e-4
    weight_decay: float = 5e-5
    dropout: float = 0.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 5
    plateau_tolerance: float = 1e-4
    decay_factor: float = 0.1
    max_epochs: int = 50
    seed: int = 0
    max_train_samples: int | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> TrainConfig:
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be at least 1, got {self.batch_size}")
        for name in ('lr_backbone', 'lr_head', 'adam_eps'):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.weight_decay >= 0:
            raise ValidationError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout must be in [0, 1), got {self.dropout}")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValidationError("Adam betas must be in [0, 1)")
        if self.patience < 1 or not self.plateau_tolerance >= 0:
            raise ValidationError("patience must be at least 1 and plateau_tolerance non-negative")
        if not 0.0 < self.decay_factor < 1.0:
            raise ValidationError(f"decay_factor must be in (0, 1), got {self.decay_factor}")
        if self.max_epochs < 1:
            raise ValidationError(f"max_epochs must be at least 1, got {self.max_epochs}")
        if self.max_train_samples is not None and self.max_train_samples < 1:
            raise ValidationError(f"max_train_samples must be positive, got {self.max_train_samples}")
        self.loss.validate()
        self.model.validate()
        return self


def _parse_bool(data: str) -> bool:
    match data.strip().lower():
        case 'true' | 'yes' | 'on' | '1':
            return True
        case 'false' | 'no' | 'off' | '0':
            return False
        case _:
            raise ValueError(f"'{data}' is not a boolean")


def _parse_int_tuple(data: str) -> tuple[int, ...]:
    return tuple(int(item) for item in data.split(',') if item.strip())


_text_retort = Retort(
    recipe=[
        name_mapping(LossConfig, trim_trailing_underscore=False),
        loader(bool, _parse_bool),
        loader(int, lambda data: int(data.strip())),
        loader(float, lambda data: float(data.strip())),
        loader(P[ModelConfig].patterns, _parse_int_tuple),
        loader(P[TrainConfig].max_train_samples,
               lambda data: None if data.strip().lower() in ('', 'none') else int(data)),
    ],
)
_plain_retort = Retort(recipe=[name_mapping(LossConfig, trim_trailing_underscore=False)])

_LINE_RE = re.compile(r'^(?P<key>[A-Za-z_]\w*(?:\.[A-Za-z_]\w*)?)\s*=\s*(?P<value>.*?)\s*$')


def _section_fields(cls: type) -> dict[str, Any]:
    return {item.name: item.type for item in fields(cls)}


def _nested(cls: type, name: str) -> type | None:
    value = getattr(cls(), name)
    return type(value) if is_dataclass(value) else None


def parse_key_values(lines: Iterable[str]) -> dict[str, Any]:
    tree: dict[str, Any] = {}
    seen: dict[str, int] = {}
    for line_number, raw_line in enumerate(lines, start=1):
        line = raw_line.strip()
        if not line or line.startswith('#'):
            continue
        match = _LINE_RE.match(line)
        if match is None:
            raise ValidationError(f"line {line_number}: expected 'key = value', got {line!r}")
        key, value = match['key'], match['value']
        if key in seen:
            raise ValidationError(f"line {line_number}: key '{key}' already set on line {seen[key]}")
        seen[key] = line_number
        section, _, name = key.rpartition('.')
        if section:
            nested = _nested(TrainConfig, section) if section in _section_fields(TrainConfig) else None
            if nested is None or name not in _section_fields(nested):
                raise ValidationError(f"line {line_number}: unknown config key '{key}'")
            tree.setdefault(section, {})[name] = value
        else:
            if name not in _section_fields(TrainConfig) or _nested(TrainConfig, name) is not None:
                raise ValidationError(f"line {line_number}: unknown config key '{key}'")
            tree[name] = value
    return tree


def parse_train_config(text: str) -> TrainConfig:
    tree = parse_key_values(text.splitlines())
    try:
        config = _text_retort.load(tree, TrainConfig)
    except (LoadError, ValueError, TypeError) as exc:
        raise ValidationError(f"Invalid train config: {exc}") from exc
    return config.validate()


def load_train_config(path: Path | str) -> TrainConfig:
    with open(path, encoding='utf-8') as file:
        return parse_train_config(file.read())


def _format_value(value: Any) -> str:
    match value:
        case bool():
            return 'true' if value else 'false'
        case None:
            return 'none'
        case Enum():
            return str(value.value)
        case list() | tuple():
            return ','.join(str(item) for item in value)
        case float():
            return repr(value)
        case _:
            return str(value)


def dump_train_config(config: TrainConfig) -> str:
    lines = []
    for item in fields(TrainConfig):
        value = getattr(config, item.name)
        if is_dataclass(value):
            for name, nested_value in _plain_retort.dump(value).items():
                lines.append(f"{item.name}.{name} = {_format_value(nested_value)}")
        else:
            lines.append(f"{item.name} = {_format_value(value)}")
    return '\n'.join(lines) + '\n'


def write_train_config(config: TrainConfig, path: Path | str) -> None:
    with atomic_open(path) as file:
        file.write(dump_train_config(config))
