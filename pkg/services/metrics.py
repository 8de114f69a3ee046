"""
Metrics
ROC AUC (Mann-Whitney form) and the bag-level / instance-level evaluation
protocols built on it
"""

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from services.errors import DimensionError, ParameterError, UndefinedMetricError


@dataclass
class ScoredSet:
    """Scores with their binary labels"""
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.scores.shape != self.labels.shape:
            raise DimensionError(f"{len(self.scores)} scores but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.scores)

    @property
    def n_positive(self) -> int:
        return int((self.labels == 1).sum())

    @property
    def n_negative(self) -> int:
        return int((self.labels == 0).sum())

    def has_both_classes(self) -> bool:
        return self.n_positive > 0 and self.n_negative > 0


class InstanceAUC(NamedTuple):
    """Mean per-bag instance AUC plus how many bags were used and skipped"""
    mean: float
    evaluated: int
    skipped: int


def roc_auc(scored: ScoredSet) -> float:
    """
    Probability a random positive outscores a random negative, ties counting 1/2

    Computed from average ranks: AUC = (R_pos - n_pos(n_pos+1)/2) / (n_pos n_neg)

    Raises:
        UndefinedMetricError: only one class present
    """
    n_pos, n_neg = scored.n_positive, scored.n_negative
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )

    # average rank of each distinct score; tied scores share it
    _, inverse, counts = np.unique(scored.scores, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    average_ranks = ends - (counts - 1) / 2.0
    ranks = average_ranks[inverse.reshape(-1)]

    rank_sum = float(ranks[scored.labels == 1].sum())
    u_statistic = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u_statistic / (n_pos * n_neg)


def instance_auc_mean(per_bag: Sequence[ScoredSet]) -> InstanceAUC:
    """
    Unweighted mean of per-bag instance AUCs

    Bags without both instance classes are skipped and counted.

    Raises:
        UndefinedMetricError: no bag is evaluable
    """
    aucs = []
    skipped = 0
    for scored in per_bag:
        if scored.has_both_classes():
            aucs.append(roc_auc(scored))
        else:
            skipped += 1

    if not aucs:
        raise UndefinedMetricError(f"no bag has both instance classes ({skipped} skipped)")
    return InstanceAUC(float(np.mean(aucs)), len(aucs), skipped)


def pooled_instance_auc(per_bag: Sequence[ScoredSet]) -> float:
    """AUC over every instance of every bag taken together"""
    if not per_bag:
        raise UndefinedMetricError("no instance scores to pool")
    return roc_auc(ScoredSet(
        np.concatenate([s.scores for s in per_bag]),
        np.concatenate([s.labels for s in per_bag])
    ))


def topk_mean(values: Sequence[float], k: int) -> float:
    """Mean of the k largest values"""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if not 1 <= k <= len(values):
        raise ParameterError(f"k must be in [1, {len(values)}], got {k}")
    return float(np.mean(np.sort(values)[::-1][:k]))
