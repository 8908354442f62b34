"""Confusion-matrix and ranking metrics for binary problems."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class ScoredLabels:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels)
        if scores.shape != labels.shape or scores.ndim != 1:
            raise ValueError("scores and labels must be 1-D and of equal length")
        if not np.isfinite(scores).all():
            raise ValueError("scores must be finite")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int8))


def confusion(predictions, labels) -> ConfusionMatrix:
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    if pred.shape != lab.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {lab.shape}")
    if pred.size == 0:
        raise ValueError("empty input")
    p, t = pred == 1, lab == 1
    return ConfusionMatrix(tp=int(np.sum(p & t)), fp=int(np.sum(p & ~t)),
                           fn=int(np.sum(~p & t)), tn=int(np.sum(~p & ~t)))


def mcc(cm: ConfusionMatrix) -> float:
    """Matthews correlation coefficient; 0 when any marginal is empty."""
    if cm.total <= 0:
        raise ValueError("empty confusion matrix")
    factors = (cm.tp + cm.fp, cm.tp + cm.fn, cm.tn + cm.fp, cm.tn + cm.fn)
    if 0 in factors:
        return 0.0
    num = cm.tp * cm.tn - cm.fp * cm.fn
    # exact integer product keeps precision for large counts
    return num / math.sqrt(math.prod(factors))


def _as_scored(s) -> ScoredLabels:
    return s if isinstance(s, ScoredLabels) else ScoredLabels(*s)


def roc_auc(s) -> float:
    """Mann-Whitney statistic: P(score of a positive > score of a negative), ties count 1/2."""
    s = _as_scored(s)
    pos = s.labels == 1
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc is undefined with a single class")
    # midranks over tied score groups
    order = np.argsort(s.scores, kind="stable")
    sorted_scores = s.scores[order]
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    ends = np.r_[starts[1:], len(order)]
    ranks = np.empty(len(order))
    ranks[order] = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(s) -> float:
    """Average precision.

    Rows are ranked by descending score; equal scores keep their input order
    (stable sort), so tied rows are not pooled. The result is the mean, over
    positives, of the precision at each positive's rank.
    """
    s = _as_scored(s)
    n_pos = int(s.labels.sum())
    if n_pos == 0:
        raise ValueError("pr_auc needs at least one positive")
    order = np.argsort(-s.scores, kind="stable")
    hits = s.labels[order] == 1
    tp_at = np.cumsum(hits)
    ranks = np.arange(1, len(hits) + 1)
    return float(np.sum(tp_at[hits] / ranks[hits]) / n_pos)
