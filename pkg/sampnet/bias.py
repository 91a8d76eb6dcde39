"""
Content-bias analysis over object categories.

Mean scores fall into four unit bins [1,2), [2,3), [3,4), [4,5]. For every
category the occurrences per bin form one column of the bin table; the
column's entropy and max / min-nonzero ratio flag biased categories, and its
inverse frequencies give the per-sample weights of the weighted EMD loss.
"""
from __future__ import annotations

from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import polars as pl
from scipy import stats as sps

from sampnet.consts import ENTROPY_THRESHOLD, NUM_BINS, RATIO_THRESHOLD
from sampnet.datamodel import AnnotatedImage
from sampnet.errors import ValidationError
from sampnet.utils import atomic_open


log = getLogger(__name__)


@dataclass(frozen=True, eq=False)
class BinTable:
    categories: tuple[str, ...]
    counts: np.ndarray  # NUM_BINS x len(categories)

    def column(self, category: str) -> np.ndarray:
        try:
            index = self.categories.index(category)
        except ValueError:
            raise ValidationError(f"Unknown category '{category}'")
        return self.counts[:, index]

    def to_frame(self) -> pl.DataFrame:
        data: dict[str, Sequence] = {'category': list(self.categories)}
        for m in range(NUM_BINS):
            data[f'bin_{m}'] = self.counts[m].tolist()
        return pl.DataFrame(data)


def bin_index(mean_score: float) -> int:
    if not 1.0 <= mean_score <= 5.0:
        raise ValidationError(f"Mean score {mean_score!r} outside [1, 5]")
    return min(int(np.floor(mean_score)) - 1, NUM_BINS - 1)


def _bin_table_from_rows(categories: Sequence[Sequence[str]], bins: Sequence[int]) -> BinTable:
    frame = pl.DataFrame(
        {'categories': [list(names) for names in categories], 'bin': list(bins)},
        schema={'categories': pl.List(pl.String), 'bin': pl.Int64},
    )
    counts_df = (
        frame
        .explode('categories', empty_as_null=True)
        .drop_nulls('categories')
        .rename({'categories': 'category'})
        .group_by(['category', 'bin']).agg(pl.len().alias('count'))
        .sort(['category', 'bin'])
    )
    names = tuple(sorted(set(counts_df['category'].to_list())))
    table = np.zeros((NUM_BINS, len(names)), dtype=np.int64)
    column_of = {name: index for index, name in enumerate(names)}
    for category, m, count in counts_df.iter_rows():
        table[m, column_of[category]] = count
    return BinTable(categories=names, counts=table)


def build_bin_table(images: Iterable[AnnotatedImage]) -> BinTable:
    images = list(images)
    return _bin_table_from_rows(
        [image.categories for image in images],
        [bin_index(image.mean_score) for image in images],
    )


def prediction_bin_table(images: Iterable[AnnotatedImage], predicted_means: Sequence[float]) -> BinTable:
    """
    Bin table of predicted mean scores, used to compare how evenly a model
    spreads its predictions inside each category.
    """
    images = list(images)
    if len(images) != len(predicted_means):
        raise ValidationError(f"{len(images)} images but {len(predicted_means)} predictions")
    bins = [bin_index(float(np.clip(mean, 1.0, 5.0))) for mean in predicted_means]
    return _bin_table_from_rows([image.categories for image in images], bins)


def _check_column(column: np.ndarray) -> np.ndarray:
    column = np.asarray(column, dtype=np.float64)
    if column.shape != (NUM_BINS,) or np.any(column < 0):
        raise ValidationError(f"Bin column must hold {NUM_BINS} non-negative counts, got {column}")
    if column.sum() <= 0:
        raise ValidationError("Category has no images")
    return column


def category_entropy(column: np.ndarray) -> float:
    return float(sps.entropy(_check_column(column)))


def bin_entropy(bin_table: BinTable, category: str) -> float:
    return category_entropy(bin_table.column(category))


def category_ratio(column: np.ndarray) -> float:
    column = _check_column(column)
    return float(column.max() / column[column > 0].min())


def alpha_weights(column: np.ndarray) -> np.ndarray:
    """
    Inverse-frequency weights sum(T) / (M * T_m); empty bins count as one occurrence.
    """
    column = _check_column(column)
    return column.sum() / (NUM_BINS * np.maximum(column, 1.0))


def alpha_table(bin_table: BinTable) -> dict[str, np.ndarray]:
    return {
        category: alpha_weights(bin_table.counts[:, index])
        for index, category in enumerate(bin_table.categories)
    }


def sample_beta(image: AnnotatedImage, alphas: Mapping[str, np.ndarray]) -> float:
    m = bin_index(image.mean_score)
    weights = [alphas[category][m] for category in image.categories if category in alphas]
    if not weights:
        return 1.0
    return float(min(weights))


@dataclass(frozen=True, eq=False)
class BiasReport:
    bin_table: BinTable
    categories: pl.DataFrame
    images: pl.DataFrame

    def betas(self) -> dict[str, float]:
        train = self.images.filter(pl.col('split') == 'train')
        return dict(zip(train['image_id'].to_list(), train['beta'].to_list()))

    def biased_categories(self) -> list[str]:
        return self.categories.filter(pl.col('biased'))['category'].to_list()


def category_frame(bin_table: BinTable, alphas: Mapping[str, np.ndarray] | None = None) -> pl.DataFrame:
    rows = []
    for index, category in enumerate(bin_table.categories):
        column = bin_table.counts[:, index]
        entropy = category_entropy(column)
        ratio = category_ratio(column)
        alpha = alphas.get(category) if alphas is not None else None
        row = {
            'category': category,
            'count': int(column.sum()),
            'entropy': entropy,
            'ratio': ratio,
            'highly_biased': entropy < ENTROPY_THRESHOLD,
            'biased': ratio > RATIO_THRESHOLD,
        }
        for m in range(NUM_BINS):
            row[f'alpha_{m}'] = float(alpha[m]) if alpha is not None else None
        rows.append(row)
    schema = {
        'category': pl.String, 'count': pl.Int64, 'entropy': pl.Float64, 'ratio': pl.Float64,
        'highly_biased': pl.Boolean, 'biased': pl.Boolean,
        **{f'alpha_{m}': pl.Float64 for m in range(NUM_BINS)},
    }
    return pl.DataFrame(rows, schema=schema)


def filter_and_split(images: Sequence[AnnotatedImage],
                     seed: int,
                     *,
                     test_fraction: float = 0.1,
                     ) -> tuple[list[AnnotatedImage], list[AnnotatedImage], BiasReport]:
    if not 0.0 <= test_fraction < 1.0:
        raise ValidationError(f"test_fraction must be in [0, 1), got {test_fraction}")

    full_table = build_bin_table(images)
    highly_biased = {
        category for index, category in enumerate(full_table.categories)
        if category_entropy(full_table.counts[:, index]) < ENTROPY_THRESHOLD
    }
    kept = [image for image in images if not highly_biased.intersection(image.categories)]
    removed = [image for image in images if highly_biased.intersection(image.categories)]
    log.info(
        "Removed %s images of %s highly biased categories: %s",
        len(removed), len(highly_biased), ", ".join(sorted(highly_biased)) or "-",
    )

    kept_table = build_bin_table(kept)
    biased = {
        category for index, category in enumerate(kept_table.categories)
        if category_ratio(kept_table.counts[:, index]) > RATIO_THRESHOLD
    }
    unbiased_flags = [not biased.intersection(image.categories) for image in kept]
    pool = [index for index, flag in enumerate(unbiased_flags) if flag]
    test_size = int(round(test_fraction * len(kept)))
    if test_size > len(pool):
        raise ValidationError(f"Requested {test_size} test images but only {len(pool)} unbiased images are available")

    rng = np.random.default_rng(seed)
    test_indices = set(np.sort(rng.choice(len(pool), size=test_size, replace=False)).tolist())
    test_members = {pool[index] for index in test_indices}
    train = [image for index, image in enumerate(kept) if index not in test_members]
    test = [image for index, image in enumerate(kept) if index in test_members]

    alphas = alpha_table(build_bin_table(train))
    rows = []
    for index, image in enumerate(kept):
        rows.append({
            'image_id': image.image_id,
            'bin': bin_index(image.mean_score),
            'unbiased': unbiased_flags[index],
            'split': 'test' if index in test_members else 'train',
            'beta': sample_beta(image, alphas),
        })
    for image in removed:
        rows.append({
            'image_id': image.image_id,
            'bin': bin_index(image.mean_score),
            'unbiased': False,
            'split': 'removed',
            'beta': None,
        })
    image_schema = {
        'image_id': pl.String, 'bin': pl.Int64, 'unbiased': pl.Boolean, 'split': pl.String, 'beta': pl.Float64,
    }
    images_df = pl.DataFrame(rows, schema=image_schema)

    removed_rows = category_frame(full_table).filter(pl.col('category').is_in(sorted(highly_biased)))
    categories_df = pl.concat([
        category_frame(kept_table, alphas).with_columns(pl.lit(False).alias('removed_category')),
        removed_rows.with_columns(pl.lit(True).alias('removed_category')),
    ])
    report = BiasReport(bin_table=kept_table, categories=categories_df, images=images_df)
    log.info("Split %s kept images into %s train / %s test", len(kept), len(train), len(test))
    return train, test, report


def format_bias_report(report: BiasReport) -> list[str]:
    lines = []
    for row in report.categories.iter_rows(named=True):
        flags = []
        if row['highly_biased']:
            flags.append('highly-biased')
        if row['biased']:
            flags.append('biased')
        lines.append(
            f"{row['category']}\tcount={row['count']}\tentropy={row['entropy']:.6f}\t"
            f"r_c={row['ratio']:.6f}\t{','.join(flags) or 'unbiased'}"
        )
    splits = report.images.group_by('split').agg(pl.len().alias('n')).sort('split')
    for split, count in splits.iter_rows():
        lines.append(f"split {split}: {count} images")
    return lines


def write_bias_report(report: BiasReport, directory: Path | str) -> None:
    directory = Path(directory)
    with atomic_open(directory / 'bias_report.txt') as file:
        file.write('\n'.join(format_bias_report(report)) + '\n')
    with atomic_open(directory / 'categories.csv') as file:
        report.categories.write_csv(file)
    with atomic_open(directory / 'images.csv') as file:
        report.images.write_csv(file)
