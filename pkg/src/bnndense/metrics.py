"""Segmentation metrics: confusion-matrix mIoU and maxF over a fixed threshold grid."""
from __future__ import annotations

import numpy as np

from .exceptions import ContractError, DataError, ShapeError

BETA2 = 0.3
THRESHOLDS = np.arange(1, 256) / 255.0


class ConfusionMatrix:
    """``counts[i, j]`` = pixels of true class ``i`` predicted as ``j``."""

    def __init__(self, k: int):
        if k < 1:
            raise ValueError("need at least one class")
        self.k = k
        self.counts = np.zeros((k, k), dtype=np.int64)

    def update(self, gt, pred) -> "ConfusionMatrix":
        gt, pred = np.asarray(gt), np.asarray(pred)
        if gt.shape != pred.shape:
            raise ShapeError(f"label maps differ in shape: {gt.shape} vs {pred.shape}")
        if gt.size == 0:
            return self
        gt, pred = gt.astype(np.int64).ravel(), pred.astype(np.int64).ravel()
        for name, lab in (("ground truth", gt), ("prediction", pred)):
            if lab.min() < 0 or lab.max() >= self.k:
                raise DataError(f"{name} label outside [0, {self.k})")
        self.counts += np.bincount(gt * self.k + pred, minlength=self.k * self.k).reshape(self.k, self.k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.k != self.k:
            raise ShapeError("class counts differ")
        out = ConfusionMatrix(self.k)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN where a class is absent from both maps."""
        if self.total == 0:
            raise ContractError("no pixels accumulated")
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)

    def miou(self) -> float:
        return float(np.nanmean(self.iou()))


def miou(gt, pred, k: int = 2) -> float:
    return ConfusionMatrix(k).update(gt, pred).miou()


def f_measure(p: float, r: float, beta2: float = BETA2) -> float:
    den = beta2 * p + r
    return 0.0 if den == 0 else (1 + beta2) * p * r / den


def maxf(probs, gt, beta2: float = BETA2) -> float:
    """Best F-measure over thresholds ``i/255``, ``i = 1..255``; prediction is ``probs >= t``."""
    probs, gt = np.asarray(probs, dtype=np.float64), np.asarray(gt)
    if probs.shape != gt.shape:
        raise ShapeError(f"probabilities {probs.shape} vs ground truth {gt.shape}")
    gt = gt.astype(bool).ravel()
    probs = probs.ravel()
    # how many grid thresholds each pixel clears: #{i : i/255 <= p}
    level = np.clip(np.searchsorted(THRESHOLDS, probs, side="right"), 0, 255)
    pos = np.bincount(level[gt], minlength=256)
    neg = np.bincount(level[~gt], minlength=256)
    tp = np.cumsum(pos[::-1])[::-1][1:]     # predicted positive at threshold i: level >= i
    fp = np.cumsum(neg[::-1])[::-1][1:]
    n_pos = gt.sum()
    best = 0.0
    for t, f in zip(tp, fp):
        p = t / (t + f) if t + f else 0.0
        r = t / n_pos if n_pos else 0.0
        best = max(best, f_measure(p, r, beta2))
    return best
