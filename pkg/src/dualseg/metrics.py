"""Confusion-matrix segmentation metrics: mIoU, mAcc and OA."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, EvaluationError


class ConfusionMatrix:
    """C x C integer counts; rows are ground truth, columns predictions."""

    def __init__(self, n_classes: int, counts: np.ndarray | None = None):
        self.n_classes = n_classes
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64) if counts is None \
            else np.asarray(counts, dtype=np.int64).copy()

    def accumulate(self, gt, pred, ignore: int | None = None) -> "ConfusionMatrix":
        gt = np.asarray(gt).ravel()
        pred = np.asarray(pred).ravel()
        if gt.shape != pred.shape:
            raise ArgumentError(f"gt/pred length mismatch {gt.shape} vs {pred.shape}")
        keep = np.ones(gt.shape, dtype=bool) if ignore is None else gt != ignore
        gt, pred = gt[keep], pred[keep]
        c = self.n_classes
        if gt.size and (gt.min() < 0 or gt.max() >= c or pred.min() < 0 or pred.max() >= c):
            raise ArgumentError("label outside [0, C) that is not the ignore label")
        self.counts += np.bincount(gt * c + pred, minlength=c * c).reshape(c, c)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.n_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class SegMetrics:
    miou: float
    macc: float
    oa: float
    per_class_iou: list[float | None]

    def to_json(self, modality: str) -> dict:
        return {"modality": modality, "mIoU": self.miou, "mAcc": self.macc, "OA": self.oa,
                "per_class_iou": self.per_class_iou}


def compute_metrics(cm: ConfusionMatrix | np.ndarray) -> SegMetrics:
    """Classes absent from both ground truth and predictions are left out of the means."""
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm, dtype=np.int64)
    total = counts.sum()
    if total <= 0:
        raise EvaluationError("empty confusion matrix")
    tp = np.diag(counts).astype(np.float64)
    rows = counts.sum(axis=1).astype(np.float64)
    cols = counts.sum(axis=0).astype(np.float64)
    present = (rows + cols) > 0
    union = rows + cols - tp
    iou = np.where(present, tp / np.where(union > 0, union, 1.0), np.nan)
    acc = np.where(rows > 0, tp / np.where(rows > 0, rows, 1.0), 0.0)
    return SegMetrics(miou=float(iou[present].mean()), macc=float(acc[present].mean()),
                      oa=float(tp.sum() / total),
                      per_class_iou=[None if np.isnan(v) else float(v) for v in iou])
