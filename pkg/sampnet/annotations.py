from __future__ import annotations

from logging import getLogger
from pathlib import Path
from typing import Iterable, Iterator

from adaptix.load_error import LoadError

from sampnet.datamodel import AnnotatedImage, dump_annotated_image, load_annotated_image
from sampnet.errors import AnnotationError
from sampnet.utils import atomic_open


log = getLogger(__name__)
FIELDS = ('image_id', 'scores', 'attributes', 'categories', 'image_path')


def parse_annotation_line(raw_line: str, line_number: int) -> AnnotatedImage:
    parts = raw_line.rstrip('\r\n').split('\t')
    if len(parts) == len(FIELDS) - 1:
        parts.append('')
    if len(parts) != len(FIELDS):
        raise AnnotationError(f"expected 4 or 5 tab-separated fields, got {len(parts)}", line=line_number)
    row = dict(zip(FIELDS, parts))
    try:
        image = load_annotated_image(row)
    except (LoadError, ValueError, TypeError) as exc:
        field = _guess_bad_field(row)
        raise AnnotationError(f"malformed record ({exc})", line=line_number, field=field) from exc
    return image.validate(line=line_number)


def _decode(raw_line: str | bytes, line_number: int) -> str:
    if isinstance(raw_line, str):
        return raw_line
    try:
        return raw_line.decode('utf-8')
    except UnicodeDecodeError as exc:
        raise AnnotationError(f"not valid UTF-8 ({exc.reason} at byte {exc.start})", line=line_number) from exc


def iter_annotations(lines: Iterable[str | bytes]) -> Iterator[AnnotatedImage]:
    seen: dict[str, int] = {}
    for line_number, raw in enumerate(lines, start=1):
        raw_line = _decode(raw, line_number)
        if not raw_line.strip():
            continue
        image = parse_annotation_line(raw_line, line_number)
        if image.image_id in seen:
            raise AnnotationError(
                f"duplicate image_id '{image.image_id}' (first seen on line {seen[image.image_id]})",
                line=line_number, field='image_id',
            )
        seen[image.image_id] = line_number
        yield image


def load_annotations(path: Path | str) -> list[AnnotatedImage]:
    path = Path(path)
    with open(path, 'rb') as file:
        images = list(iter_annotations(file))
    log.info("Loaded %s annotated images from '%s'", len(images), path)
    return images


def format_annotation_line(image: AnnotatedImage) -> str:
    row = dump_annotated_image(image)
    return '\t'.join(row[name] for name in FIELDS)


def write_annotations(images: Iterable[AnnotatedImage], path: Path | str) -> None:
    with atomic_open(path, 'w') as file:
        for image in images:
            file.write(format_annotation_line(image) + '\n')


def _guess_bad_field(row: dict[str, str]) -> str | None:
    for name, parse in (('scores', int), ('attributes', float)):
        try:
            [parse(item) for item in row[name].split(',') if item.strip()]
        except ValueError:
            return name
    return None
