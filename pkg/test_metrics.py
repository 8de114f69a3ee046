#!/usr/bin/env python3
"""
Tests for ROC AUC and the aggregation metrics
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent))

from services.errors import DimensionError, ParameterError, UndefinedMetricError
from services.metrics import ScoredSet, instance_auc_mean, pooled_instance_auc, roc_auc, topk_mean


def pairwise_auc(scores, labels):
    """O(n^2) oracle: wins plus half ties over all positive/negative pairs"""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def test_auc_examples():
    assert roc_auc(ScoredSet([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])) == 0.75
    assert roc_auc(ScoredSet([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])) == 1.0
    assert roc_auc(ScoredSet([0.5] * 6, [0, 1, 0, 1, 1, 0])) == 0.5


@pytest.mark.parametrize('seed', range(1000))
def test_auc_matches_pairwise_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    # coarse rounding forces ties
    scores = np.round(rng.random(n), int(rng.integers(1, 4)))
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    assert roc_auc(ScoredSet(scores, labels)) == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)


@pytest.mark.parametrize('seed', range(10))
def test_auc_invariant_under_increasing_transform(seed):
    rng = np.random.default_rng(seed)
    scores = rng.random(50)
    labels = np.r_[np.zeros(25), np.ones(25)]
    base = roc_auc(ScoredSet(scores, labels))
    assert roc_auc(ScoredSet(np.exp(3.0 * scores) + 7.0, labels)) == pytest.approx(base, abs=1e-12)


def test_auc_single_class_is_undefined():
    with pytest.raises(UndefinedMetricError):
        roc_auc(ScoredSet([0.1, 0.2], [1, 1]))
    with pytest.raises(UndefinedMetricError):
        roc_auc(ScoredSet([], []))


def test_scored_set_length_mismatch():
    with pytest.raises(DimensionError):
        ScoredSet([0.1, 0.2], [1])


def test_instance_auc_mean_examples():
    perfect = ScoredSet([0.9, 0.1], [1, 0])
    coin = ScoredSet([0.5, 0.5], [1, 0])
    result = instance_auc_mean([perfect, coin])
    assert result.mean == 0.75
    assert (result.evaluated, result.skipped) == (2, 0)

    all_negative = ScoredSet([0.3, 0.2], [0, 0])
    result = instance_auc_mean([perfect, all_negative])
    assert result.mean == 1.0
    assert result.skipped == 1

    with pytest.raises(UndefinedMetricError):
        instance_auc_mean([all_negative])


def test_pooled_instance_auc():
    first = ScoredSet([0.9, 0.2], [1, 0])
    second = ScoredSet([0.3, 0.1], [0, 0])
    assert pooled_instance_auc([first, second]) == 1.0
    with pytest.raises(UndefinedMetricError):
        pooled_instance_auc([])


def test_topk_mean_examples():
    assert topk_mean([0.9, 0.8, 0.7], 2) == pytest.approx(0.85)
    assert topk_mean([0.9, 0.8, 0.7], 3) == pytest.approx(0.8)
    assert topk_mean([0.2, 0.9, 0.4], 1) == 0.9
    with pytest.raises(ParameterError):
        topk_mean([0.1], 2)
    with pytest.raises(ParameterError):
        topk_mean([0.1], 0)


@pytest.mark.parametrize('seed', range(20))
def test_auc_of_negated_scores_is_complement(seed):
    rng = np.random.default_rng(seed)
    scores = rng.permutation(40).astype(np.float64) / 40.0
    labels = rng.integers(0, 2, 40)
    labels[0], labels[1] = 0, 1
    forward = roc_auc(ScoredSet(scores, labels))
    backward = roc_auc(ScoredSet(-scores, labels))
    assert forward + backward == pytest.approx(1.0, abs=1e-12)
