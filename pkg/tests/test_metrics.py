"""Metric tests: hand examples, brute-force oracle, invariances."""

import numpy as np
import pytest

from ecdctr.errors import MetricUndefinedError
from ecdctr.metrics import ScoredGroup, auc, gauc, groups_from_arrays, pooled_auc


def brute_auc(scores, labels):
    """O(n^2) pairwise count: wins + half ties over all pos/neg pairs."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    if not pos or not neg:
        return None
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def test_perfect_ranking():
    g = ScoredGroup(0, [0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])
    assert auc(g) == 1.0


def test_inverted_ranking():
    g = ScoredGroup(0, [0.1, 0.9], [1, 0])
    assert auc(g) == 0.0


def test_all_ties_half():
    g = ScoredGroup(0, [0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0])
    assert auc(g) == 0.5


def test_single_class_undefined():
    assert auc(ScoredGroup(0, [0.1, 0.2], [1, 1])) is None
    assert auc(ScoredGroup(0, [0.1, 0.2], [0, 0])) is None


def test_weighted_mean_hand_example():
    # user a: 4 samples, AUC 0.75; user b: 2 samples, AUC 0.0;
    # user c: single class, excluded. (4*0.75 + 2*0.0) / 6 = 0.5
    groups = [
        ScoredGroup(1, [0.9, 0.35, 0.4, 0.3], [1, 1, 0, 0]),
        ScoredGroup(2, [0.1, 0.8], [1, 0]),
        ScoredGroup(3, [0.5, 0.6, 0.7], [1, 1, 1]),
    ]
    assert gauc(groups) == pytest.approx(0.5)
    # and a second example with a different weighting: 0.625
    groups = [
        ScoredGroup(1, [3.0, 1.0], [1, 0]),          # AUC 1.0, weight 2
        ScoredGroup(2, [0.2, 0.2, 0.2], [1, 0, 0]),  # AUC 0.5, weight 3
        ScoredGroup(3, [1.0, 2.0, 2.0], [0, 1, 0]),  # AUC 0.75, weight 3
    ]
    assert gauc(groups) == pytest.approx((2 * 1.0 + 3 * 0.5 + 3 * 0.75) / 8)


def test_no_defined_group_raises():
    with pytest.raises(MetricUndefinedError):
        gauc([ScoredGroup(0, [0.1], [1]), ScoredGroup(1, [0.2, 0.3], [0, 0])])


def test_auc_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = rng.integers(2, 40)
        scores = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], size=n)
        labels = rng.integers(0, 2, size=n)
        got = auc(ScoredGroup(0, scores, labels))
        want = brute_auc(scores.tolist(), labels.tolist())
        if want is None:
            assert got is None
        else:
            assert got == pytest.approx(want, abs=1e-12)


def test_gauc_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n_users = rng.integers(2, 15)
        uids = rng.integers(0, n_users, size=rng.integers(5, 80))
        scores = rng.normal(size=len(uids)).round(1)
        labels = rng.integers(0, 2, size=len(uids))
        groups = groups_from_arrays(uids, scores, labels.astype(np.int64))
        num = den = 0.0
        for u in np.unique(uids):
            m = uids == u
            a = brute_auc(scores[m].tolist(), labels[m].tolist())
            if a is not None:
                num += m.sum() * a
                den += m.sum()
        if den == 0:
            with pytest.raises(MetricUndefinedError):
                gauc(groups)
        else:
            assert gauc(groups) == pytest.approx(num / den, abs=1e-12)


def test_monotone_transform_invariance():
    rng = np.random.default_rng(2)
    scores = rng.normal(size=50)
    labels = rng.integers(0, 2, size=50)
    base = auc(ScoredGroup(0, scores, labels))
    warped = auc(ScoredGroup(0, np.exp(3 * scores) + 7, labels))
    assert warped == pytest.approx(base, abs=1e-12)


def test_sample_order_invariance():
    rng = np.random.default_rng(3)
    uids = rng.integers(0, 8, size=60)
    scores = rng.normal(size=60)
    labels = rng.integers(0, 2, size=60).astype(np.int64)
    base = gauc(groups_from_arrays(uids, scores, labels))
    perm = rng.permutation(60)
    again = gauc(groups_from_arrays(uids[perm], scores[perm], labels[perm]))
    assert again == pytest.approx(base, abs=1e-12)


def test_pooled_auc_ignores_users():
    rng = np.random.default_rng(4)
    scores = rng.normal(size=80)
    labels = rng.integers(0, 2, size=80).astype(np.int64)
    assert pooled_auc(scores, labels) == pytest.approx(
        brute_auc(scores.tolist(), labels.tolist()), abs=1e-12)
