import pytest

from sampnet.annotations import format_annotation_line, iter_annotations, load_annotations, write_annotations
from sampnet.errors import AnnotationError

from tests.conftest import make_image


LINES = [
    "img-1\t1,2,3,4,5\t0.1,0.2,0.3,0.4,0.5\tbird,sky\timages/img-1.png\n",
    "img-2\t5,5,5,5,4\t-1,0,0,0,1\t\n",
]


def test_parses_records():
    first, second = iter_annotations(LINES)
    assert first.image_id == 'img-1'
    assert first.scores == (1, 2, 3, 4, 5)
    assert first.attributes == (0.1, 0.2, 0.3, 0.4, 0.5)
    assert first.categories == ('bird', 'sky')
    assert first.image_path == 'images/img-1.png'
    assert second.categories == ()
    assert second.image_path is None
    assert second.mean_score == pytest.approx(4.8)


def test_blank_lines_are_skipped():
    assert len(list(iter_annotations(["\n", LINES[0], "   \n"]))) == 1


def test_duplicate_ids():
    with pytest.raises(AnnotationError) as exc_info:
        list(iter_annotations([LINES[0], LINES[0]]))
    assert exc_info.value.line == 2
    assert exc_info.value.field == 'image_id'


@pytest.mark.parametrize('line, field', [
    ("a\t1,2,x,4,5\t0,0,0,0,0\t\n", 'scores'),
    ("a\t1,2,3,4,5\t0,0,zero,0,0\t\n", 'attributes'),
    ("a\t1,2,3,4,9\t0,0,0,0,0\t\n", 'scores'),
    ("a\t1,2,3,4,5\t0,0,0,0,2\t\n", 'attributes'),
])
def test_bad_fields_are_named(line, field):
    with pytest.raises(AnnotationError) as exc_info:
        list(iter_annotations([LINES[0], line]))
    assert exc_info.value.line == 2
    assert exc_info.value.field == field


def test_wrong_field_count():
    with pytest.raises(AnnotationError) as exc_info:
        list(iter_annotations(["a\t1,2,3,4,5\n"]))
    assert exc_info.value.line == 1


def test_invalid_utf8_names_the_line(tmp_path):
    path = tmp_path / 'annotations.tsv'
    path.write_bytes(LINES[0].encode() + b'b\xff\t1,2,3,4,5\t0,0,0,0,0\t\n')
    with pytest.raises(AnnotationError) as exc_info:
        load_annotations(path)
    assert exc_info.value.line == 2
    assert 'UTF-8' in str(exc_info.value)


def test_write_then_load(tmp_path):
    images = [
        make_image('x', (1, 1, 2, 2, 3), ('cat',)),
        make_image('y', (4, 4, 5, 5, 5)),
    ]
    path = tmp_path / 'annotations.tsv'
    write_annotations(images, path)
    assert load_annotations(path) == images
    assert format_annotation_line(images[1]).split('\t')[3:] == ['', '']
