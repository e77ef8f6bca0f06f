"""ROC-AUC and average precision with ties grouped at one threshold."""

from __future__ import annotations

import csv
import math
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .errors import UndefinedMetricError


_EXACT_AP_MAX = 20000  # thresholds beyond which AP falls back to compensated float sums


class ScoredLabel(NamedTuple):
    score: float
    label: int  # 0 normal, 1 anomalous


def _as_arrays(scores, labels):
    if labels is None:
        items = list(scores)
        scores = [it.score for it in items]
        labels = [it.label for it in items]
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def _threshold_counts(s, y):
    """Cumulative (tp, fp) at each distinct score, highest threshold first."""
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return tp, fp


def roc_auc(scores, labels=None) -> float:
    """Mann-Whitney estimate of P(score+ > score-) + 0.5 P(score+ == score-).

    Accepts either parallel ``scores``/``labels`` arrays or a single iterable
    of :class:`ScoredLabel`.
    """
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC needs at least one positive and one negative")
    order = np.argsort(s, kind="stable")
    ss = s[order]
    ranks = np.empty(s.size)
    # average 1-based ranks over tied groups
    starts = np.r_[0, np.flatnonzero(np.diff(ss)) + 1]
    ends = np.r_[starts[1:], s.size]
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels=None) -> float:
    """Sum over distinct thresholds of (R_t - R_{t-1}) * P_t."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    tp, fp = _threshold_counts(s, y)
    gain = np.diff(np.r_[0, tp])  # positives added at each threshold
    keep = gain > 0
    gain, tp, n_sel = gain[keep], tp[keep], (tp + fp)[keep]
    if tp.size <= _EXACT_AP_MAX:
        # AP is rational; summing exactly gives the correctly rounded value
        total = sum((Fraction(int(g) * int(t), int(n)) for g, t, n in zip(gain, tp, n_sel)), Fraction(0))
        return float(total / n_pos)
    return math.fsum((gain * tp / n_sel).tolist()) / n_pos


def roc_points(scores, labels=None):
    """(fpr, tpr) per distinct threshold, starting at (0, 0)."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC curve needs both classes")
    tp, fp = _threshold_counts(s, y)
    return np.r_[0.0, fp / n_neg], np.r_[0.0, tp / n_pos]


def evaluate(scores, labels=None) -> dict:
    s, y = _as_arrays(scores, labels)
    return {"n": int(y.size), "n_pos": int(y.sum()),
            "auc": roc_auc(s, y), "ap": average_precision(s, y)}


def write_roc_csv(path, scores, labels=None):
    fpr, tpr = roc_points(scores, labels)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr"])
        for a, b in zip(fpr, tpr):
            writer.writerow([repr(float(a)), repr(float(b))])
