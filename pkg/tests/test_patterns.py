import numpy as np
import pytest

from sampnet.consts import ALL_PATTERNS, PARTITION_COUNTS
from sampnet.errors import ValidationError
from sampnet.patterns import all_partition_cells, boundary_edges, partition_cells, pattern_mask


@pytest.mark.parametrize('size', [7, 56])
@pytest.mark.parametrize('p', ALL_PATTERNS)
def test_partitions_cover_grid(p, size):
    partition_map = pattern_mask(p, size, size)
    assert partition_map.num_partitions == PARTITION_COUNTS[p]
    cells = all_partition_cells(partition_map)
    assert all(len(group) > 0 for group in cells)
    joined = np.concatenate(cells)
    assert len(joined) == size * size
    assert len(np.unique(joined)) == size * size


def test_partition_counts():
    assert tuple(PARTITION_COUNTS[p] for p in ALL_PATTERNS) == (2, 2, 2, 2, 2, 4, 4, 9)


def test_thirds_bands_on_7x7():
    partition_map = pattern_mask(8, 7, 7)
    rows = partition_map.assignment[:, 0] // 3
    assert tuple(np.bincount(rows)) == (2, 3, 2)
    cols = partition_map.assignment[0, :] % 3
    assert tuple(np.bincount(cols)) == (2, 3, 2)


def test_vertical_halves_on_56x56():
    assert pattern_mask(1, 56, 56).partition_sizes() == (1568, 1568)


def test_main_diagonal_on_56x56():
    partition_map = pattern_mask(3, 56, 56)
    assert partition_map.partition_sizes() == (1540, 1596)
    # cells on the diagonal go to the later partition
    assert np.all(np.diag(partition_map.assignment) == 1)


def test_center_surround_on_7x7():
    assignment = pattern_mask(5, 7, 7).assignment
    assert assignment[3, 3] == 0
    assert assignment[0, 0] == 1
    assert np.count_nonzero(assignment == 0) == 9


def test_quadrants_are_symmetric_on_even_grid():
    assert pattern_mask(6, 8, 8).partition_sizes() == (16, 16, 16, 16)


def test_radial_sectors_on_odd_grid():
    # the center cell and the diagonals belong to the vertical sectors
    assert pattern_mask(7, 7, 7).partition_sizes() == (15, 16, 9, 9)


def test_cells_are_row_major():
    cells = partition_cells(pattern_mask(2, 4, 4), 0)
    np.testing.assert_array_equal(cells, np.arange(8))


def test_masks_are_read_only():
    with pytest.raises(ValueError):
        pattern_mask(1, 7, 7).assignment[0, 0] = 1


@pytest.mark.parametrize('p, height, width', [(0, 7, 7), (9, 7, 7), (1, 2, 7), (1, 7, 2)])
def test_rejects(p, height, width):
    with pytest.raises(ValidationError):
        pattern_mask(p, height, width)


def test_partition_index_out_of_range():
    with pytest.raises(ValidationError):
        partition_cells(pattern_mask(1, 7, 7), 2)


def test_boundary_edges_of_vertical_halves():
    horizontal, vertical = boundary_edges(pattern_mask(1, 4, 4))
    assert not horizontal.any()
    assert vertical.shape == (4, 3)
    np.testing.assert_array_equal(np.flatnonzero(vertical[0]), [1])


@pytest.mark.parametrize('p, flip', [(1, np.fliplr), (2, np.flipud)])
def test_halves_mirror_on_even_grids(p, flip):
    assignment = pattern_mask(p, 8, 8).assignment
    np.testing.assert_array_equal(flip(assignment), 1 - assignment)


def test_quadrants_are_permuted_by_mirroring():
    assignment = pattern_mask(6, 8, 8).assignment
    for mirrored in (np.fliplr(assignment), np.flipud(assignment)):
        # every partition maps onto exactly one partition
        pairs = set(zip(assignment.ravel().tolist(), mirrored.ravel().tolist()))
        assert len(pairs) == 4
        assert {a for a, _ in pairs} == {b for _, b in pairs} == {0, 1, 2, 3}


def test_center_column_of_odd_grid_joins_right_half():
    assignment = pattern_mask(1, 7, 7).assignment
    assert np.all(assignment[:, 3] == 1)
    assert pattern_mask(1, 7, 7).partition_sizes() == (21, 28)


def test_first_quadrant_cells():
    np.testing.assert_array_equal(partition_cells(pattern_mask(6, 4, 4), 0), [0, 1, 4, 5])
