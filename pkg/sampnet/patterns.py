"""
Composition-pattern partitions of an H x W grid.

Cell (i, j), 1-indexed, has its center at u = (i - 0.5) / H, v = (j - 0.5) / W.
Every comparison below is carried out on the integer numerators 2i - 1 and
2j - 1 so that ties (a cell center exactly on a boundary) resolve the same
way on every platform: half-open intervals, the boundary cell goes to the
later partition.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from sampnet.consts import ALL_PATTERNS, PARTITION_COUNTS
from sampnet.errors import ValidationError


PATTERN_NAMES = {
    1: 'vertical halves',
    2: 'horizontal halves',
    3: 'main diagonal',
    4: 'anti-diagonal',
    5: 'center / surround',
    6: 'quadrants',
    7: 'radial sectors',
    8: 'rule of thirds',
}


@dataclass(frozen=True, eq=False)
class PartitionMap:
    pattern_id: int
    height: int
    width: int
    assignment: np.ndarray

    @property
    def num_partitions(self) -> int:
        return PARTITION_COUNTS[self.pattern_id]

    def partition_sizes(self) -> tuple[int, ...]:
        counts = np.bincount(self.assignment.ravel(), minlength=self.num_partitions)
        return tuple(int(count) for count in counts)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PartitionMap):
            return NotImplemented
        return (
            (self.pattern_id, self.height, self.width) == (other.pattern_id, other.height, other.width)
            and bool(np.array_equal(self.assignment, other.assignment))
        )


@lru_cache(maxsize=None)
def pattern_mask(p: int, height: int, width: int) -> PartitionMap:
    if p not in ALL_PATTERNS:
        raise ValidationError(f"Unknown pattern id {p}, expected one of {ALL_PATTERNS}")
    if height < 3 or width < 3:
        raise ValidationError(f"Grid {height}x{width} is too small for composition patterns (need at least 3x3)")

    H, W = height, width
    # a = 2i - 1 and b = 2j - 1, so u = a / 2H and v = b / 2W
    a = (2 * np.arange(1, H + 1) - 1)[:, None]
    b = (2 * np.arange(1, W + 1) - 1)[None, :]
    a, b = np.broadcast_arrays(a, b)

    match p:
        case 1:
            assignment = (b >= W).astype(np.int64)
        case 2:
            assignment = (a >= H).astype(np.int64)
        case 3:
            assignment = (a * W >= b * H).astype(np.int64)
        case 4:
            assignment = (a * W + b * H >= 2 * H * W).astype(np.int64)
        case 5:
            inner_rows = (2 * H <= 3 * a) & (3 * a < 4 * H)
            inner_cols = (2 * W <= 3 * b) & (3 * b < 4 * W)
            assignment = np.where(inner_rows & inner_cols, 0, 1)
        case 6:
            assignment = 2 * (a >= H) + (b >= W)
        case 7:
            du = a - H
            dv = b - W
            vertical = np.abs(du) * W >= np.abs(dv) * H
            assignment = np.where(vertical, np.where(du < 0, 0, 1), np.where(dv < 0, 2, 3))
        case 8:
            rows = np.minimum((3 * a) // (2 * H), 2)
            cols = np.minimum((3 * b) // (2 * W), 2)
            assignment = 3 * rows + cols
        case _:
            raise ValidationError(f"Unknown pattern id {p}")

    assignment = np.ascontiguousarray(assignment, dtype=np.int64)
    assignment.flags.writeable = False
    return PartitionMap(pattern_id=p, height=H, width=W, assignment=assignment)


def partition_cells(partition_map: PartitionMap, k: int) -> np.ndarray:
    """
    Flat row-major indices of the cells in partition ``k``.

    This order is the layout of saliency vectors and therefore part of the
    checkpoint compatibility contract.
    """
    if not 0 <= k < partition_map.num_partitions:
        raise ValidationError(
            f"Partition {k} out of range for pattern {partition_map.pattern_id} "
            f"with {partition_map.num_partitions} partitions"
        )
    return np.flatnonzero(partition_map.assignment.ravel() == k)


def all_partition_cells(partition_map: PartitionMap) -> list[np.ndarray]:
    return [partition_cells(partition_map, k) for k in range(partition_map.num_partitions)]


def boundary_edges(partition_map: PartitionMap) -> tuple[np.ndarray, np.ndarray]:
    """
    Boolean masks of interior cell edges separating different partitions:
    ``horizontal[i, j]`` lies between rows i and i + 1, ``vertical[i, j]``
    between columns j and j + 1.
    """
    assignment = partition_map.assignment
    horizontal = assignment[1:, :] != assignment[:-1, :]
    vertical = assignment[:, 1:] != assignment[:, :-1]
    return horizontal, vertical
