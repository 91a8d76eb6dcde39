from __future__ import annotations

import os
from contextlib import contextmanager
from pathlib import Path
from typing import IO, Any, Iterator


@contextmanager
def atomic_open(path: Path | str, mode: str = 'w', *, allow_overwrite: bool = True) -> Iterator[IO[Any]]:
    """
    Writes go to ``<path>.tmp``, opened exclusively, and replace ``path`` only
    when the block finishes without error. A concurrent writer to the same
    path fails on the exclusive open instead of silently racing.
    """
    path = Path(path)
    if not allow_overwrite and path.exists():
        raise FileExistsError(
            f"File {path} already exists. If you want to overwrite it please use allow_overwrite=True"
        )
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + '.tmp')
    binary = 'b' in mode
    file = open(
        tmp_path, mode.replace('w', 'x'),
        encoding=None if binary else 'utf-8',
        newline=None if binary else '\n',
    )
    try:
        with file:
            yield file
    except BaseException:
        tmp_path.unlink(missing_ok=True)
        raise
    os.replace(tmp_path, path)


def resolve_relative(path: str, base_directory: Path) -> Path:
    candidate = Path(path)
    if candidate.is_absolute():
        return candidate
    return (base_directory / candidate).resolve()
