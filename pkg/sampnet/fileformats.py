from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import IO, Any, Iterable, Mapping

import numpy as np

from sampnet.consts import CHECKPOINT_MAGIC, FEATURE_MAGIC
from sampnet.datamodel import FeatureMap, ModelConfig, dump_model_config, load_model_config
from sampnet.errors import FormatError
from sampnet.utils import atomic_open


log = getLogger(__name__)

DTYPES = {'f32': np.dtype('<f4'), 'f64': np.dtype('<f8')}
_DIMS = struct.Struct('<3I')
_HEADER_LENGTH = struct.Struct('<I')


def write_feature_array(array: np.ndarray, path: Path | str) -> None:
    array = np.asarray(array)
    if array.ndim != 3:
        raise FormatError(f"Feature arrays are C x H x W, got shape {array.shape}")
    with atomic_open(path, 'wb') as file:
        file.write(FEATURE_MAGIC)
        file.write(_DIMS.pack(*array.shape))
        file.write(np.ascontiguousarray(array, dtype=DTYPES['f32']).tobytes())


def read_feature_array(path: Path | str) -> np.ndarray:
    path = Path(path)
    with open(path, 'rb') as file:
        _expect_magic(file, FEATURE_MAGIC, path)
        dims_raw = file.read(_DIMS.size)
        if len(dims_raw) != _DIMS.size:
            raise FormatError(f"'{path}' is truncated inside the dimension header")
        channels, height, width = _DIMS.unpack(dims_raw)
        expected = channels * height * width * DTYPES['f32'].itemsize
        remaining = os.fstat(file.fileno()).st_size - file.tell()
        if remaining < expected:
            raise FormatError(f"'{path}' is truncated: expected {expected} payload bytes, found {remaining}")
        if remaining > expected:
            raise FormatError(
                f"'{path}' has {remaining - expected} trailing bytes; dimensions {channels}x{height}x{width} do not match"
            )
        payload = file.read(expected)
    return np.frombuffer(payload, dtype=DTYPES['f32']).reshape(channels, height, width).copy()


def write_feature_file(features: FeatureMap, path: Path | str) -> None:
    write_feature_array(features.data, path)


def read_feature_file(path: Path | str) -> FeatureMap:
    return FeatureMap(read_feature_array(path))


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return self.config.digest()


def write_checkpoint(checkpoint: Checkpoint, path: Path | str, *, dtype: str = 'f32') -> None:
    if dtype not in DTYPES:
        raise FormatError(f"Unsupported checkpoint dtype '{dtype}'")
    entries = []
    payloads = []
    offset = 0
    for name, tensor in checkpoint.tensors.items():
        data = np.ascontiguousarray(tensor, dtype=DTYPES[dtype])
        entries.append({'name': name, 'dtype': dtype, 'shape': list(data.shape), 'offset': offset})
        payloads.append(data.tobytes())
        offset += data.nbytes
    header = {
        'config': dump_model_config(checkpoint.config),
        'digest': checkpoint.digest,
        'meta': checkpoint.meta,
        'tensors': entries,
    }
    header_raw = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    with atomic_open(path, 'wb') as file:
        file.write(CHECKPOINT_MAGIC)
        file.write(_HEADER_LENGTH.pack(len(header_raw)))
        file.write(header_raw)
        for payload in payloads:
            file.write(payload)
    log.info("Wrote checkpoint with %s tensors to '%s'", len(entries), path)


def read_checkpoint(path: Path | str, *, required: Iterable[str] = ()) -> Checkpoint:
    path = Path(path)
    with open(path, 'rb') as file:
        _expect_magic(file, CHECKPOINT_MAGIC, path)
        file_size = os.fstat(file.fileno()).st_size
        length_raw = file.read(_HEADER_LENGTH.size)
        if len(length_raw) != _HEADER_LENGTH.size:
            raise FormatError(f"'{path}' is truncated inside the header length")
        (header_length,) = _HEADER_LENGTH.unpack(length_raw)
        if header_length > file_size - file.tell():
            raise FormatError(f"'{path}' declares a {header_length}-byte header but is shorter than that")
        try:
            header = json.loads(file.read(header_length).decode('utf-8'))
            entries = header['tensors']
            config = load_model_config(header['config'])
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"'{path}' has an unreadable header: {exc}") from exc
        if header.get('digest') != config.digest():
            raise FormatError(f"'{path}' config digest does not match its config")
        payload_start = file.tell()
        tensors = _read_tensors(file, entries, payload_start, file_size, path)
    missing = [name for name in required if name not in tensors]
    if missing:
        raise FormatError(f"'{path}' is missing tensor '{missing[0]}'")
    return Checkpoint(config=config, tensors=tensors, meta=header.get('meta', {}))


def _read_tensors(file: IO[bytes],
                  entries: list[dict[str, Any]],
                  payload_start: int,
                  file_size: int,
                  path: Path,
                  ) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for entry in entries:
        name = entry['name']
        dtype = DTYPES.get(entry['dtype'])
        if dtype is None:
            raise FormatError(f"'{path}' tensor '{name}' has unsupported dtype '{entry['dtype']}'")
        try:
            shape = tuple(int(size) for size in entry['shape'])
            offset = int(entry['offset'])
        except (TypeError, ValueError) as exc:
            raise FormatError(f"'{path}' tensor '{name}' has a malformed shape or offset") from exc
        if any(size < 0 for size in shape) or offset < 0:
            raise FormatError(f"'{path}' tensor '{name}' has a negative shape {shape} or offset {offset}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        start = payload_start + offset
        if start + nbytes > file_size:
            raise FormatError(f"'{path}' is truncated inside tensor '{name}'")
        file.seek(start)
        tensors[name] = np.frombuffer(file.read(nbytes), dtype=dtype).reshape(shape).copy()
    return tensors


def checkpoint_from_params(config: ModelConfig,
                           params: Mapping[str, np.ndarray],
                           meta: Mapping[str, Any] | None = None,
                           ) -> Checkpoint:
    return Checkpoint(config=config, tensors=dict(params), meta=dict(meta or {}))


def _expect_magic(file: IO[bytes], magic: bytes, path: Path) -> None:
    found = file.read(len(magic))
    if found != magic:
        raise FormatError(f"'{path}' does not start with {magic.decode()} (found {found!r})")
