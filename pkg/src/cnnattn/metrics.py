"""Exact AU-ROC and average precision, plus brute-force oracles."""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate P(s+ > s-) + 0.5 P(s+ == s-) via midranks."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AU-ROC needs at least one positive and one negative")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aupr(scores, labels) -> float:
    """Average precision: sum of precision at each recall increment.

    Tied scores cross the threshold together as one block.
    """
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AU-PR needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    tp = np.cumsum(y[order])
    # last index of each tie block
    ends = np.r_[np.nonzero(np.diff(s_sorted))[0], s.size - 1]
    tp_b = tp[ends]
    precision = tp_b / (ends + 1.0)
    # weight by integer hit counts and divide once, so a perfect ranker gives exactly 1
    d_tp = np.diff(np.r_[0, tp_b])
    return math.fsum(precision * d_tp) / n_pos


def brute_force_oracle(scores, labels) -> tuple[float, float]:
    """AU-ROC by enumerating every (positive, negative) pair; AP by explicit thresholds.

    Slow on purpose; only for cross-checking the fast paths (n <= 1000).
    """
    s, y = _as_arrays(scores, labels)
    if s.size > 1000:
        raise ValueError("brute-force oracle is limited to 1000 points")
    pos = [float(v) for v in s[y]]
    neg = [float(v) for v in s[~y]]
    if not pos or not neg:
        roc = None
    else:
        wins = 0.0
        for a in pos:
            for b in neg:
                if a > b:
                    wins += 1.0
                elif a == b:
                    wins += 0.5
        roc = wins / (len(pos) * len(neg))
    if not pos:
        raise UndefinedMetricError("AU-PR needs at least one positive")

    ap = 0.0
    prev_recall = 0.0
    for t in sorted(set(s.tolist()), reverse=True):
        predicted = [i for i in range(s.size) if s[i] >= t]
        hits = sum(1 for i in predicted if y[i])
        recall = hits / len(pos)
        precision = hits / len(predicted)
        ap += precision * (recall - prev_recall)
        prev_recall = recall
    if roc is None:
        raise UndefinedMetricError("AU-ROC needs at least one positive and one negative")
    return roc, ap
