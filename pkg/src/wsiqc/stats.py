"""Agreement statistics: Spearman, Pearson, and confusion-matrix ratios."""
from __future__ import annotations

import numpy as np

from .errors import ZeroVariance


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least two pairs")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("series must be finite")
    return x, y


def rankdata(a) -> np.ndarray:
    """1-based ranks, ties receive the average of the ranks they span."""
    a = np.asarray(a, dtype=np.float64).ravel()
    order = np.argsort(a, kind="mergesort")
    sorted_a = a[order]
    ranks = np.empty(a.size, dtype=np.float64)
    start = 0
    n = a.size
    while start < n:
        stop = start + 1
        while stop < n and sorted_a[stop] == sorted_a[start]:
            stop += 1
        ranks[order[start:stop]] = (start + stop + 1) / 2.0
        start = stop
    return ranks


def plcc(x, y) -> float:
    x, y = _pair(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise ZeroVariance("a series is constant")
    r = float(np.dot(dx, dy)) / (np.sqrt(sxx) * np.sqrt(syy))
    return max(-1.0, min(1.0, r))


def srcc(x, y) -> float:
    """Spearman correlation.

    Without ties the classic 1 - 6 sum(d^2) / (n (n^2 - 1)) form is used; with
    ties that shortcut is inexact, so Pearson correlation of average ranks is
    returned instead.
    """
    x, y = _pair(x, y)
    rx, ry = rankdata(x), rankdata(y)
    ties = np.unique(x).size < x.size or np.unique(y).size < y.size
    if ties:
        return plcc(rx, ry)
    n = x.size
    d2 = int(np.sum((rx.astype(np.int64) - ry.astype(np.int64)) ** 2))
    return 1.0 - 6.0 * d2 / (n * (n * n - 1))


def confusion_stats(tp: int, tn: int, fp: int, fn: int):
    """(accuracy, sensitivity, specificity); a ratio with a zero denominator is None."""
    if min(tp, tn, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    total = tp + tn + fp + fn
    if total == 0:
        raise ValueError("empty confusion matrix")

    def ratio(a, b):
        return a / b if b else None

    return ratio(tp + tn, total), ratio(tp, tp + fn), ratio(tn, tn + fp)
