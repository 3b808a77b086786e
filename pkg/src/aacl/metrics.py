"""Confusion-matrix based IoU evaluation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .raster import IGNORE


@dataclass(frozen=True)
class EvalReport:
    """Per-class IoU (NaN for classes absent from both gt and prediction) and mIoU."""

    per_class_iou: np.ndarray
    miou: float
    absent: tuple

    def to_csv(self, class_names=None):
        names = class_names or [f"class_{c}" for c in range(len(self.per_class_iou))]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "iou"])
        for name, value in zip(names, self.per_class_iou):
            writer.writerow([name, "NAN" if np.isnan(value) else f"{value:.17g}"])
        writer.writerow(["mIoU", f"{self.miou:.17g}"])
        return buf.getvalue()


def new_confusion(num_classes):
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate(cm, pred, gt):
    """Add one prediction/ground-truth pair; rows are gt, columns prediction."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    c = cm.shape[0]
    valid = gt != IGNORE
    g = gt[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if g.size and (g.max() >= c or p.max() >= c or p.min() < 0):
        raise ValueError("class index outside the confusion matrix")
    cm += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
    return cm


def iou(cm):
    cm = np.asarray(cm)
    if cm.sum() == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(union > 0, tp / np.maximum(union, 1), np.nan)
    present = union > 0
    absent = tuple(int(c) for c in np.flatnonzero(~present))
    return EvalReport(per_class, float(per_class[present].mean()), absent)


def evaluate(predictions, ground_truth, num_classes):
    cm = new_confusion(num_classes)
    for pred, gt in zip(predictions, ground_truth):
        accumulate(cm, pred, gt)
    return iou(cm), cm
