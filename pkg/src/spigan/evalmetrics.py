"""Confusion-matrix IoU metrics and the per-image negative-transfer rate."""
from __future__ import annotations

import numpy as np

IGNORE_LABEL = 255


class ConfusionMatrix:
    """C x C pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    def copy(self) -> "ConfusionMatrix":
        cm = ConfusionMatrix(self.n_classes)
        cm.counts = self.counts.copy()
        return cm

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise ValueError("cannot add confusion matrices with different class counts")
        cm = self.copy()
        cm.counts += other.counts
        return cm

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    """Add one image (or batch) to ``cm`` in place and return it."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    c = cm.n_classes
    if pred.size and (pred.min() < 0 or pred.max() >= c):
        raise ValueError(f"predictions must lie in 0..{c - 1}")
    valid = gt != IGNORE_LABEL
    g = gt[valid].astype(np.int64)
    if g.size and (g.min() < 0 or g.max() >= c):
        raise ValueError(f"ground truth must lie in 0..{c - 1} or be {IGNORE_LABEL}")
    p = pred[valid].astype(np.int64)
    cm.counts += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
    return cm


def iou(cm: ConfusionMatrix) -> np.ndarray:
    """Per-class IoU; NaN for classes absent from both ground truth and prediction."""
    tp = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - tp
    out = np.full(cm.n_classes, np.nan)
    present = union > 0
    out[present] = tp[present] / union[present]
    return out


def mean_iou(cm: ConfusionMatrix) -> float:
    vals = iou(cm)
    vals = vals[~np.isnan(vals)]
    return float(vals.mean()) if vals.size else float("nan")


def per_image_miou(preds: np.ndarray, gts: np.ndarray, n_classes: int) -> np.ndarray:
    return np.array([mean_iou(accumulate(ConfusionMatrix(n_classes), p, g)) for p, g in zip(preds, gts)])


def negative_transfer_rate(adapted, source_only) -> float:
    """Fraction of images whose adapted mIoU is strictly below the source-only mIoU."""
    a = np.asarray(adapted, dtype=np.float64)
    s = np.asarray(source_only, dtype=np.float64)
    if a.shape != s.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {s.shape}")
    if a.size == 0:
        raise ValueError("need at least one image")
    return float(np.mean(a < s))
