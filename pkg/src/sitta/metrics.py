"""Segmentation metrics built on per-image confusion counts.

Counts are additive (``PerImageCounts.__add__``), so dataset-level metrics can be
computed from counts gathered in any order or in parallel.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Literal, Sequence

import numpy as np

from .core import IGNORE_LABEL

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PerImageCounts:
    intersection: np.ndarray
    union: np.ndarray
    pred_count: np.ndarray
    gt_count: np.ndarray
    correct: int
    total: int

    @property
    def num_classes(self) -> int:
        return int(self.intersection.shape[0])

    @property
    def present(self) -> np.ndarray:
        """Classes in prediction or ground truth (C_n)."""
        return (self.pred_count > 0) | (self.gt_count > 0)

    def __add__(self, other: "PerImageCounts") -> "PerImageCounts":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge counts with different class counts")
        return PerImageCounts(
            self.intersection + other.intersection,
            self.union + other.union,
            self.pred_count + other.pred_count,
            self.gt_count + other.gt_count,
            self.correct + other.correct,
            self.total + other.total,
        )


def confusion_counts(
    pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_label: int = IGNORE_LABEL
) -> PerImageCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    valid = gt != ignore_label
    for name, arr in (("pred", pred[valid]), ("gt", gt[valid])):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} labels must lie in [0, {num_classes}) or equal {ignore_label}")
    p = pred[valid].astype(np.int64)
    g = gt[valid].astype(np.int64)
    pred_count = np.bincount(p, minlength=num_classes)
    gt_count = np.bincount(g, minlength=num_classes)
    intersection = np.bincount(g[p == g], minlength=num_classes)
    union = pred_count + gt_count - intersection
    return PerImageCounts(intersection, union, pred_count, gt_count, int((p == g).sum()), int(p.size))


def _sum(counts: Iterable[PerImageCounts]) -> PerImageCounts:
    items = list(counts)
    if not items:
        raise ValueError("at least one image is required")
    total = items[0]
    for c in items[1:]:
        total = total + c
    return total


def miou(counts: Sequence[PerImageCounts]) -> float:
    agg = _sum(counts)
    keep = agg.union > 0
    if not keep.any():
        raise ValueError("no class has a nonzero union")
    return float(np.mean(agg.intersection[keep] / agg.union[keep]) * 100.0)


def miou_c(counts: Sequence[PerImageCounts], presence: Literal["either", "gt"] = "either") -> float:
    """Class-centric mean IoU.

    ``presence="either"`` averages class k over images where prediction or ground truth
    contains k; ``presence="gt"`` only over images whose ground truth contains k.
    """
    items = list(counts)
    if not items:
        raise ValueError("at least one image is required")
    num_classes = items[0].num_classes
    sums = np.zeros(num_classes)
    hits = np.zeros(num_classes, dtype=np.int64)
    for c in items:
        mask = c.present if presence == "either" else c.gt_count > 0
        iou = np.divide(c.intersection, c.union, out=np.zeros(num_classes), where=c.union > 0)
        sums[mask] += iou[mask]
        hits[mask] += 1
    keep = hits > 0
    if not keep.any():
        raise ValueError("no class is present in any image")
    return float(np.mean(sums[keep] / hits[keep]) * 100.0)


def image_miou(counts: PerImageCounts) -> float | None:
    """Per-image mean IoU over C_n, or None when every pixel is ignored."""
    present = counts.present
    if not present.any():
        return None
    return float(np.mean(counts.intersection[present] / counts.union[present]) * 100.0)


def miou_i(counts: Sequence[PerImageCounts]) -> float:
    scores = []
    for idx, c in enumerate(counts):
        s = image_miou(c)
        if s is None:
            logger.warning("image %d has no scored class; skipped", idx)
            continue
        scores.append(s)
    if not scores:
        raise ValueError("no image has a scored class")
    return float(np.mean(scores))


def mdice(counts: Sequence[PerImageCounts]) -> float:
    agg = _sum(counts)
    denom = agg.pred_count + agg.gt_count
    keep = denom > 0
    if not keep.any():
        raise ValueError("no class has a nonzero union")
    return float(np.mean(2.0 * agg.intersection[keep] / denom[keep]) * 100.0)


def pixel_accuracy(counts: Sequence[PerImageCounts]) -> float:
    agg = _sum(counts)
    if agg.total == 0:
        raise ValueError("no valid pixels")
    return agg.correct / agg.total * 100.0


def evaluate(counts: Sequence[PerImageCounts]) -> dict[str, float]:
    items = list(counts)
    return {
        "miou": miou(items),
        "miou_c": miou_c(items),
        "miou_i": miou_i(items),
        "mdice": mdice(items),
        "accuracy": pixel_accuracy(items),
    }


def error_reduction(na: float, tta: float) -> float:
    """Share (%) of the residual error removed: (tta - na) / (100 - na) * 100."""
    if na >= 100.0:
        raise ValueError("error reduction is undefined when the baseline is already 100")
    return (tta - na) / (100.0 - na) * 100.0
