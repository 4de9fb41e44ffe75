"""Ranking metrics: per-user AUC and the impression-weighted group AUC.

The group metric is the impression-weighted average of per-user AUC;
users whose samples are all one class have no defined AUC and are
excluded from both the numerator and the denominator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MetricUndefinedError


@dataclass
class ScoredGroup:
    user_id: int
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.scores) == 0 or len(self.scores) != len(self.labels):
            raise ValueError("group needs matching, non-empty scores/labels")


def auc(group: ScoredGroup) -> float | None:
    """P(random positive scored above random negative), ties at 0.5.

    None when the group holds only one class.
    """
    labels = group.labels
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    # midrank formulation: sum of positive ranks minus the positive-only part
    order = np.argsort(group.scores, kind="mergesort")
    s = group.scores[order]
    ranks = np.empty(len(s))
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            j += 1
        ranks[i:j] = 0.5 * (i + j - 1) + 1.0
        i = j
    pos_rank_sum = ranks[labels[order] == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def gauc(groups: list[ScoredGroup]) -> float:
    """Impression-weighted mean of defined per-user AUCs."""
    num = den = 0.0
    for g in sorted(groups, key=lambda g: g.user_id):
        a = auc(g)
        if a is None:
            continue
        w = len(g.labels)
        num += w * a
        den += w
    if den == 0.0:
        raise MetricUndefinedError("no group has both classes")
    return num / den


def groups_from_arrays(user_ids: np.ndarray, scores: np.ndarray,
                       labels: np.ndarray) -> list[ScoredGroup]:
    order = np.argsort(user_ids, kind="mergesort")
    uid, sc, lb = user_ids[order], scores[order], labels[order]
    bounds = np.flatnonzero(np.diff(uid)) + 1
    groups = []
    for chunk_u, chunk_s, chunk_l in zip(
            np.split(uid, bounds), np.split(sc, bounds), np.split(lb, bounds)):
        groups.append(ScoredGroup(int(chunk_u[0]), chunk_s, chunk_l))
    return groups


def pooled_auc(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Plain AUC over all samples, ignoring user grouping."""
    return auc(ScoredGroup(0, scores, labels)) if len(scores) else None


@dataclass
class DayMetric:
    day: int
    gauc: float | None
    auc: float | None
    n_samples: int
    n_groups: int


@dataclass
class EvalReport:
    variant: str
    seed: int
    config_fingerprint: str
    days: list[DayMetric] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def mean_over(self, start_day: int) -> tuple[float, float]:
        """(mean gauc, mean auc) over days >= start_day with defined values."""
        g = [d.gauc for d in self.days if d.day >= start_day and d.gauc is not None]
        a = [d.auc for d in self.days if d.day >= start_day and d.auc is not None]
        if not g:
            raise MetricUndefinedError("no defined daily GAUC in window")
        return float(np.mean(g)), float(np.mean(a))
