"""Confusion-matrix IoU metrics and source/target domain gaps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import IGNORE_LABEL
from .errors import DataError, ShapeError


@dataclass
class MetricsReport:
    per_class_iou: np.ndarray  # NaN where a class is absent from prediction and truth
    miou: float
    confusion: np.ndarray | None = None  # [truth, prediction] counts

    @classmethod
    def from_per_class(cls, values: Sequence[float]) -> "MetricsReport":
        arr = np.asarray(values, dtype=np.float64)
        return cls(arr, mean_iou(arr))

    @property
    def num_classes(self) -> int:
        return len(self.per_class_iou)


@dataclass
class DomainGap:
    per_class: np.ndarray
    mean: float


def mean_iou(per_class: Sequence[float]) -> float:
    """Mean over classes, skipping NaN entries (classes with no support)."""
    arr = np.asarray(per_class, dtype=np.float64)
    valid = ~np.isnan(arr)
    return float(arr[valid].mean()) if valid.any() else float("nan")


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """Counts of (truth, prediction) pairs, skipping pixels where either side is 255."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    for what, arr in (("prediction", pred), ("truth", truth)):
        bad = (arr != IGNORE_LABEL) & ((arr < 0) | (arr >= num_classes))
        if bad.any():
            raise DataError(f"{what} contains class id {int(arr[bad].max())} >= {num_classes}")
    keep = (pred != IGNORE_LABEL) & (truth != IGNORE_LABEL)
    flat = truth[keep].astype(np.int64) * num_classes + pred[keep].astype(np.int64)
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_from_confusion(conf: np.ndarray) -> np.ndarray:
    tp = np.diag(conf).astype(np.float64)
    denom = conf.sum(axis=0) + conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)


def compute_miou(predictions, truth, num_classes: int) -> MetricsReport:
    conf = confusion_matrix(predictions, truth, num_classes)
    iou = iou_from_confusion(conf)
    return MetricsReport(iou, mean_iou(iou), conf)


def domain_gap(source, target, decimals: int | None = None) -> DomainGap:
    """Per-class source IoU minus target IoU, plus the mean gap.

    ``source``/``target`` are MetricsReports or plain per-class sequences. Pass
    ``decimals`` to round to the precision the inputs were reported at.
    """
    s = np.atleast_1d(np.asarray(getattr(source, "per_class_iou", source), dtype=np.float64))
    t = np.atleast_1d(np.asarray(getattr(target, "per_class_iou", target), dtype=np.float64))
    if s.shape != t.shape:
        raise ShapeError(f"class sets differ: {s.shape} vs {t.shape}")
    gap = s - t
    mean = mean_iou(gap)
    if decimals is not None:
        gap = np.round(gap, decimals)
        mean = round(mean, decimals)
    return DomainGap(gap, mean)
