"""Confusion counts and the class-frequency weighted F1 score."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray
    support: np.ndarray

    @property
    def total(self) -> int:
        return int(self.support.sum())

    def f1(self) -> np.ndarray:
        """Per-class ``2TP / (2TP + FP + FN)``; 0 where the denominator is 0."""
        denom = 2 * self.tp + self.fp + self.fn
        out = np.zeros(len(self.tp))
        nz = denom > 0
        out[nz] = 2 * self.tp[nz] / denom[nz]
        return out


def confusion(preds, labels, num_classes: int) -> ConfusionCounts:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.size} predictions vs {labels.size} labels")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    tp = np.diag(cm).copy()
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    fp = predicted - tp
    fn = support - tp
    tn = labels.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn, support)


def weighted_f1(counts: ConfusionCounts) -> float:
    """Support-weighted mean of per-class F1, evaluated in exact rational arithmetic."""
    n = counts.total
    if n == 0:
        raise ValueError("weighted F1 of zero samples is undefined")
    total = Fraction(0)
    for tp, fp, fn, sup in zip(counts.tp, counts.fp, counts.fn, counts.support):
        denom = 2 * int(tp) + int(fp) + int(fn)
        if sup and denom:
            total += Fraction(int(sup), n) * Fraction(2 * int(tp), denom)
    return float(total)


def weighted_f1_score(preds, labels, num_classes: int) -> float:
    return weighted_f1(confusion(preds, labels, num_classes))
