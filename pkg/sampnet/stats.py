"""
Evaluation metrics and rater-consistency statistics.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from itertools import combinations
from logging import getLogger
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import polars as pl
from scipy import stats as sps

from sampnet.consts import NUM_SCORES
from sampnet.datamodel import ScoreDistribution, expectation
from sampnet.errors import UndefinedStatisticError, ValidationError
from sampnet.inner_types import TrackerFactory, default_tracker


log = getLogger(__name__)
Seed = int | Sequence[int]


# -- metrics ------------------------------------------------------------------

def expected_score(yhat: ScoreDistribution | np.ndarray) -> float:
    distribution = yhat if isinstance(yhat, ScoreDistribution) else ScoreDistribution(np.asarray(yhat))
    return expectation(distribution.probs)


def _paired(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValidationError(f"Paired samples differ in length: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValidationError("Correlation needs at least two samples")
    return a, b


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da = a - a.mean()
    db = b - b.mean()
    denominator = np.sqrt(np.dot(da, da) * np.dot(db, db))
    if not denominator > 0:
        raise UndefinedStatisticError("Correlation is undefined for a zero-variance sample")
    return float(np.clip(np.dot(da, db) / denominator, -1.0, 1.0))


def lcc(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    return _pearson(*_paired(a, b))


def srcc(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    a, b = _paired(a, b)
    return _pearson(sps.rankdata(a), sps.rankdata(b))


def mse(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size == 0:
        raise ValidationError(f"MSE needs two non-empty samples of equal length, got {a.size} and {b.size}")
    return float(np.mean((a - b) ** 2))


@dataclass(frozen=True)
class MetricsReport:
    mse: float
    emd: float
    emd_r: float
    srcc: float
    lcc: float
    count: int
    config_digest: str

    def as_dict(self) -> dict[str, float | int | str]:
        return asdict(self)

    def format_text(self) -> str:
        return '\n'.join([
            f"samples      {self.count}",
            f"MSE          {self.mse:.4f}",
            f"EMD (r={self.emd_r:g})  {self.emd:.4f}",
            f"SRCC         {self.srcc:.4f}",
            f"LCC          {self.lcc:.4f}",
            f"config       {self.config_digest}",
        ])


# -- rater consistency ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RatingTable:
    """
    m raters x n items of integer scores in 1..5.
    """
    scores: np.ndarray

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores)
        if scores.ndim != 2:
            raise ValidationError(f"Rating table must be 2-d (raters x items), got shape {scores.shape}")
        if scores.shape[0] < 2 or scores.shape[1] < 2:
            raise ValidationError(f"Rating table needs at least 2 raters and 2 items, got {scores.shape}")
        if not np.issubdtype(scores.dtype, np.integer):
            if not np.all(np.isfinite(scores)) or np.any(scores != np.round(scores)):
                raise ValidationError("Rating table must hold integer scores")
            scores = scores.astype(np.int64)
        if scores.min() < 1 or scores.max() > NUM_SCORES:
            raise ValidationError(f"Ratings must lie in 1..{NUM_SCORES}")
        object.__setattr__(self, 'scores', scores)

    @property
    def raters(self) -> int:
        return self.scores.shape[0]

    @property
    def items(self) -> int:
        return self.scores.shape[1]

    def subset(self, items: np.ndarray) -> RatingTable:
        return RatingTable(self.scores[:, items])


def read_rating_table(path: Path | str) -> RatingTable:
    """
    TSV with one row per rater, one column per item, no header.
    """
    frame = pl.read_csv(path, separator='\t', has_header=False)
    return RatingTable(frame.to_numpy().astype(np.int64))


def _tie_term(row: np.ndarray) -> float:
    _, counts = np.unique(row, return_counts=True)
    return float(np.sum(counts.astype(np.float64) ** 3 - counts))


@dataclass(frozen=True)
class _Concordance:
    ranks: np.ndarray
    denominator: float
    raters: int
    items: int

    def w_from_rank_sums(self, rank_sums: np.ndarray) -> float:
        m, n = self.raters, self.items
        numerator = 12.0 * np.dot(rank_sums, rank_sums) - 3.0 * m ** 2 * n * (n + 1) ** 2
        w = numerator / self.denominator
        if -1e-12 < w < 0.0:
            w = 0.0
        return float(w)


def _concordance(table: RatingTable) -> _Concordance:
    m, n = table.raters, table.items
    ranks = sps.rankdata(table.scores, axis=1)
    ties = sum(_tie_term(row) for row in table.scores)
    denominator = float(m ** 2 * n * (n ** 2 - 1)) - m * ties
    if not denominator > 0:
        raise UndefinedStatisticError("Kendall's W is undefined: every rater gives a constant score")
    return _Concordance(ranks=ranks, denominator=denominator, raters=m, items=n)


def kendalls_w(table: RatingTable) -> float:
    concordance = _concordance(table)
    return concordance.w_from_rank_sums(concordance.ranks.sum(axis=0))


def _permutation_generators(seed: Seed, count: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.default_rng(child) for child in children]


def w_null_distribution(table: RatingTable, n_perm: int = 999, seed: Seed = 0) -> np.ndarray:
    """
    W of ``n_perm`` tables whose rater rows are shuffled independently.
    """
    if n_perm < 99:
        raise ValidationError(f"Use at least 99 permutations, got {n_perm}")
    concordance = _concordance(table)
    null = np.empty(n_perm)
    for index, rng in enumerate(_permutation_generators(seed, n_perm)):
        shuffled = rng.permuted(concordance.ranks, axis=1)
        null[index] = concordance.w_from_rank_sums(shuffled.sum(axis=0))
    return null


def null_p_value(observed: float, null: np.ndarray) -> float:
    exceed = int(np.count_nonzero(null >= observed - 1e-12))
    return (1 + exceed) / (null.size + 1)


def permutation_test_w(table: RatingTable, n_perm: int = 999, seed: Seed = 0) -> float:
    return null_p_value(kendalls_w(table), w_null_distribution(table, n_perm, seed))


def spearman_permutation_p(a: np.ndarray, b: np.ndarray, n_perm: int = 999, seed: Seed = 0) -> tuple[float, float]:
    """
    Spearman's rho and its one-sided permutation p-value (rho_perm >= rho).
    """
    ranks_a = sps.rankdata(a)
    ranks_b = sps.rankdata(b)
    rho = _pearson(ranks_a, ranks_b)
    exceed = 0
    for rng in _permutation_generators(seed, n_perm):
        if _pearson(ranks_a, rng.permutation(ranks_b)) >= rho - 1e-12:
            exceed += 1
    return rho, (1 + exceed) / (n_perm + 1)


def pairwise_spearman(table: RatingTable, n_perm: int = 999, seed: Seed = 0) -> list[tuple[int, int, float, float]]:
    seed_prefix = list(np.atleast_1d(seed))
    results = []
    for j, k in combinations(range(table.raters), 2):
        rho, p = spearman_permutation_p(table.scores[j], table.scores[k], n_perm, [*seed_prefix, j, k])
        results.append((j, k, rho, p))
    return results


def pairwise_spearman_p(table: RatingTable, n_perm: int = 999, seed: Seed = 0) -> float:
    pairs = pairwise_spearman(table, n_perm, seed)
    return float(np.mean([p for *_, p in pairs]))


def benjamini_hochberg(p_values: Sequence[float] | np.ndarray, q: float = 0.05) -> np.ndarray:
    p = np.asarray(p_values, dtype=np.float64).ravel()
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValidationError("p-values must lie in [0, 1]")
    n = p.size
    rejected = np.zeros(n, dtype=bool)
    if n == 0:
        return rejected
    order = np.argsort(p, kind='stable')
    thresholds = np.arange(1, n + 1) * q / n
    below = np.flatnonzero(p[order] <= thresholds)
    if below.size:
        rejected[order[:below[-1] + 1]] = True
    return rejected


@dataclass(frozen=True, eq=False)
class BatchConsistency:
    w: np.ndarray
    p_values: np.ndarray
    rejected: np.ndarray
    method: str

    @property
    def fraction(self) -> float:
        return float(self.rejected.mean()) if self.rejected.size else 0.0

    @property
    def mean_w(self) -> float:
        return float(self.w.mean()) if self.w.size else float('nan')


def batch_consistency_report(table: RatingTable,
                             batch_size: int = 100,
                             q: float = 0.05,
                             seed: int = 0,
                             *,
                             method: Literal['kendall', 'spearman'] = 'kendall',
                             n_perm: int = 999,
                             tracker: TrackerFactory = default_tracker,
                             ) -> BatchConsistency:
    if batch_size < 2:
        raise ValidationError(f"batch_size must be at least 2, got {batch_size}")
    if table.items < batch_size:
        raise ValidationError(f"Table has {table.items} items, fewer than one batch of {batch_size}")
    order = np.random.default_rng(seed).permutation(table.items)
    batch_count = table.items // batch_size
    batches = [order[b * batch_size:(b + 1) * batch_size] for b in range(batch_count)]
    w_values, p_values = [], []
    for index, items in enumerate(tracker(batches, desc=f"{method} batches", total=batch_count)):
        batch = table.subset(items)
        w_values.append(kendalls_w(batch))
        if method == 'kendall':
            p_values.append(permutation_test_w(batch, n_perm, [seed, index]))
        else:
            p_values.append(pairwise_spearman_p(batch, n_perm, [seed, index]))
    p_array = np.asarray(p_values)
    rejected = benjamini_hochberg(p_array, q)
    log.info("%s of %s batches significant at FDR %s (%s)", int(rejected.sum()), batch_count, q, method)
    return BatchConsistency(np.asarray(w_values), p_array, rejected, method)


def batch_consistency(table: RatingTable,
                      batch_size: int = 100,
                      q: float = 0.05,
                      seed: int = 0,
                      *,
                      method: Literal['kendall', 'spearman'] = 'kendall',
                      n_perm: int = 999,
                      ) -> float:
    return batch_consistency_report(table, batch_size, q, seed, method=method, n_perm=n_perm).fraction
