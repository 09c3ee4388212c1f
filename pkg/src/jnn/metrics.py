"""Recognition (ROC sweep) and detection (IoU, NMS, AP, mAP) metrics.

Pixel boxes are ``(x, y, w, h)`` with ``(x, y)`` the top-left corner.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .detection_math import BBox


class MetricError(ValueError):
    """Raised when a metric is undefined for the given input."""


def _xywh(box) -> tuple[float, float, float, float]:
    if isinstance(box, BBox):
        return box.to_xywh()
    x, y, w, h = box
    return float(x), float(y), float(w), float(h)


def iou(a, b) -> float:
    """Intersection over union of two boxes (``BBox`` or top-left ``xywh``)."""
    ax, ay, aw, ah = _xywh(a)
    bx, by, bw, bh = _xywh(b)
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` top-left ``xywh`` arrays."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 0] + a[:, None, 2], b[None, :, 0] + b[None, :, 2])
    y2 = np.minimum(a[:, None, 1] + a[:, None, 3], b[None, :, 1] + b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return inter / union


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str | int
    label: str
    box: tuple[float, float, float, float]
    confidence: float


def nms(records: Sequence[DetectionRecord], iou_threshold: float = 0.45) -> list[DetectionRecord]:
    """Greedy suppression; equal confidences keep input order."""
    records = list(records)
    if not records:
        return []
    order = sorted(range(len(records)), key=lambda i: -records[i].confidence)
    boxes = np.array([records[i].box for i in order], dtype=float)
    overlaps = iou_matrix(boxes, boxes)
    kept: list[int] = []
    for pos in range(len(order)):
        if all(overlaps[pos, k] <= iou_threshold for k in kept):
            kept.append(pos)
    return [records[order[k]] for k in kept]


# --------------------------------------------------------------------------
# recognition
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RocPoint:
    threshold: float
    tpr: float
    fpr: float
    accuracy: float
    precision: float


@dataclass(frozen=True)
class RocReport:
    points: tuple[RocPoint, ...]
    auc: float
    best: RocPoint


def confusion_at(scores: np.ndarray, labels: np.ndarray, threshold: float) -> RocPoint:
    pred = scores >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    precision = tp / (tp + fp) if tp + fp else 1.0
    return RocPoint(float(threshold), tp / n_pos, fp / n_neg, (tp + tn) / labels.size, precision)


def roc_sweep(scores: Sequence[float], labels: Sequence[int], n_thresholds: int = 20) -> RocReport:
    """Threshold the scores at ``n_thresholds`` evenly spaced values across
    their observed range; a score at or above the threshold predicts a match.

    AUC integrates the trapezoids over (FPR, TPR) with the (0,0) and (1,1)
    corners added.  ``best`` is the most accurate point, lowest threshold on ties.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricError("scores and labels must be equal-length vectors")
    if not np.all((y == 0) | (y == 1)):
        raise MetricError("labels must be 0 or 1")
    if y.sum() == 0 or y.sum() == y.size:
        raise MetricError("ROC needs at least one positive and one negative label")
    thresholds = np.linspace(s.min(), s.max(), n_thresholds)
    points = tuple(confusion_at(s, y, t) for t in thresholds)
    curve = sorted({(0.0, 0.0), (1.0, 1.0), *((p.fpr, p.tpr) for p in points)})
    fpr = np.array([c[0] for c in curve])
    tpr = np.array([c[1] for c in curve])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    best = max(points, key=lambda p: (p.accuracy, -p.threshold))
    return RocReport(points, auc, best)


# --------------------------------------------------------------------------
# detection
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class APResult:
    label: str
    ap: float | None  # None when the class has no ground truth
    tp: int
    fp: int
    n_gt: int


def _interpolated_ap(recall: np.ndarray, precision: np.ndarray, method: str) -> float:
    if method == "11point":
        return float(np.mean([precision[recall >= r].max() if np.any(recall >= r) else 0.0
                              for r in np.linspace(0, 1, 11)]))
    if method != "all":
        raise MetricError(f"unknown interpolation {method!r}")
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def match_detections(records: Iterable[DetectionRecord], gts: Mapping,
                     iou_threshold: float = 0.5) -> tuple[list[DetectionRecord], np.ndarray]:
    """Greedy matching in descending confidence (ties keep input order).

    Each detection claims the unclaimed ground truth in its image with the
    highest IoU, provided that IoU reaches ``iou_threshold``.  Returns the
    sorted records and a boolean true-positive flag per record.
    """
    records = sorted(records, key=lambda r: -r.confidence)
    claimed = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    hits = np.zeros(len(records), dtype=bool)
    for i, rec in enumerate(records):
        boxes = gts.get(rec.image_id, [])
        if not len(boxes):
            continue
        overlaps = iou_matrix(np.array([rec.box]), np.array([_xywh(b) for b in boxes]))[0]
        overlaps[claimed[rec.image_id]] = -1.0
        j = int(np.argmax(overlaps))
        if overlaps[j] >= iou_threshold:
            claimed[rec.image_id][j] = True
            hits[i] = True
    return records, hits


def pr_curve(records: Iterable[DetectionRecord], gts: Mapping,
             iou_threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (recall, precision) after each detection in confidence order."""
    n_gt = sum(len(v) for v in gts.values())
    _, hits = match_detections(records, gts, iou_threshold)
    ctp = np.cumsum(hits)
    recall = ctp / n_gt if n_gt else np.zeros(len(hits))
    precision = ctp / np.arange(1, len(hits) + 1)
    return recall, precision


def average_precision(records: Iterable[DetectionRecord], gts: Mapping, label: str = "",
                      iou_threshold: float = 0.5, interpolation: str = "all") -> APResult:
    """VOC-style AP for one class; ``gts`` maps image id to ground-truth boxes."""
    records, hits = match_detections(records, gts, iou_threshold)
    n_gt = sum(len(v) for v in gts.values())
    tp = int(hits.sum())
    fp = len(records) - tp
    if n_gt == 0:
        return APResult(label, None, tp, fp, 0)
    ctp = np.cumsum(hits)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(hits) + 1)
    ap = _interpolated_ap(recall, precision, interpolation) if len(records) else 0.0
    return APResult(label, ap, tp, fp, n_gt)


def mean_ap(results: Iterable[APResult]) -> float:
    aps = [r.ap for r in results if r.ap is not None]
    if not aps:
        raise MetricError("no class with ground truth to average")
    return float(np.mean(aps))


def format_report(metrics: Mapping[str, float]) -> str:
    """One ``name value`` line per metric."""
    return "".join(f"{k} {v:.6g}\n" for k, v in metrics.items())
