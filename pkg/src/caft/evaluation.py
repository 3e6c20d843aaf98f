"""Localization metrics: IoU, localization accuracy with and without the
classification condition, mean IoU, and the threshold curve.

One predicted box per image; with several ground-truth boxes the best match
counts. A prediction is correct when its IoU reaches the threshold
(inclusive). Images missing the labels a metric needs are excluded from that
metric with a warning, never silently dropped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .errors import DataError
from .maskops import BBox

log = logging.getLogger(__name__)

DEFAULT_IOU_THRESHOLD = 0.5
DEFAULT_CURVE_THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(1, 10))


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two half-open pixel boxes."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def _best_ious(preds: dict, gts: dict):
    """Per-image max IoU against ground truth; returns (ious, skipped_ids)."""
    best = {}
    skipped = []
    for image_id, pred in preds.items():
        gt_boxes = gts.get(image_id) or []
        if not gt_boxes:
            skipped.append(image_id)
            continue
        best[image_id] = max(iou(pred, gt) for gt in gt_boxes)
    if skipped:
        log.warning("%d images without ground-truth boxes skipped", len(skipped))
    return best, skipped


def gt_known_loc(preds: dict, gts: dict, threshold: float = DEFAULT_IOU_THRESHOLD) -> float:
    """Percentage of images whose best IoU is >= threshold."""
    best, _ = _best_ious(preds, gts)
    if not best:
        raise DataError("no image has both a prediction and ground truth")
    hits = sum(1 for value in best.values() if value >= threshold)
    return 100.0 * hits / len(best)


def topk_loc(
    preds: dict,
    gts: dict,
    gt_classes: dict,
    pred_classes: dict,
    k: int,
    threshold: float = DEFAULT_IOU_THRESHOLD,
) -> float | None:
    """Percentage of images with the true class among the first k predictions
    and a correct localization. None when no image carries class labels."""
    best, _ = _best_ious(preds, gts)
    eligible = 0
    hits = 0
    missing = 0
    for image_id, value in best.items():
        gt_class = gt_classes.get(image_id)
        classes = pred_classes.get(image_id)
        if gt_class is None or classes is None or len(classes) < k:
            missing += 1
            continue
        eligible += 1
        if gt_class in classes[:k] and value >= threshold:
            hits += 1
    if missing:
        log.warning("%d images without usable class labels excluded from top-%d", missing, k)
    if eligible == 0:
        return None
    return 100.0 * hits / eligible


def mean_iou(preds: dict, gts: dict) -> float:
    best, _ = _best_ious(preds, gts)
    if not best:
        raise DataError("no image has both a prediction and ground truth")
    return sum(best.values()) / len(best)


def loc_curve(preds: dict, gts: dict, thresholds) -> list:
    """(threshold, accuracy) pairs; thresholds must ascend, accuracy is
    monotone non-increasing."""
    thresholds = list(thresholds)
    if thresholds != sorted(thresholds):
        raise DataError("thresholds must be sorted ascending")
    best, _ = _best_ious(preds, gts)
    if not best:
        raise DataError("no image has both a prediction and ground truth")
    n = len(best)
    return [
        (t, 100.0 * sum(1 for value in best.values() if value >= t) / n) for t in thresholds
    ]


@dataclass
class EvalReport:
    gt_known_loc: float
    top1_loc: float | None
    top5_loc: float | None
    mean_iou: float
    curve: list
    n_images: int
    fallback_count: int
    skipped_no_gt: int
    skipped_no_class: int

    def to_dict(self) -> dict:
        return {
            "gt_known_loc": self.gt_known_loc,
            "top1_loc": self.top1_loc,
            "top5_loc": self.top5_loc,
            "mean_iou": self.mean_iou,
            "curve": [[t, v] for t, v in self.curve],
            "n_images": self.n_images,
            "fallback_count": self.fallback_count,
            "skipped_no_gt": self.skipped_no_gt,
            "skipped_no_class": self.skipped_no_class,
        }


def evaluate(
    preds: dict,
    gts: dict,
    gt_classes: dict,
    pred_classes: dict,
    threshold: float = DEFAULT_IOU_THRESHOLD,
    curve_thresholds=DEFAULT_CURVE_THRESHOLDS,
    fallback_count: int = 0,
) -> EvalReport:
    """Full report over aligned per-image dictionaries."""
    best, skipped = _best_ious(preds, gts)
    if not best:
        raise DataError("no image has both a prediction and ground truth")
    n = len(best)
    have_classes = [
        i for i in best if gt_classes.get(i) is not None and pred_classes.get(i) is not None
    ]
    return EvalReport(
        gt_known_loc=gt_known_loc(preds, gts, threshold),
        top1_loc=topk_loc(preds, gts, gt_classes, pred_classes, 1, threshold),
        top5_loc=topk_loc(preds, gts, gt_classes, pred_classes, 5, threshold),
        mean_iou=mean_iou(preds, gts),
        curve=loc_curve(preds, gts, curve_thresholds),
        n_images=n,
        fallback_count=fallback_count,
        skipped_no_gt=len(skipped),
        skipped_no_class=n - len(have_classes),
    )
