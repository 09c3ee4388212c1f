"""Pair loss, anchor-box coding, target assignment and the detection loss.

Grid quantities use cell units: a box centre at ``(3.5, 4.5)`` lies in the
middle of cell column 3, row 4.  Raw detector output is laid out as
``(B, A*5, S, S)`` with channel ``a*5 + k`` holding component ``k`` of
``(t_x, t_y, t_w, t_h, t_o)`` for anchor ``a``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import numerics as nx
from .numerics import NumericalError, Tensor

EPS = 1e-7


class AnchorPrior(NamedTuple):
    pw: float
    ph: float


class RawPrediction(NamedTuple):
    tx: float
    ty: float
    tw: float
    th: float
    to: float = 0.0


@dataclass(frozen=True)
class BBox:
    """Centre-format box; ``conf`` is set only for decoded predictions."""

    x: float
    y: float
    w: float
    h: float
    conf: float | None = None

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box size must be positive, got w={self.w}, h={self.h}")

    def scaled(self, factor: float) -> "BBox":
        return BBox(self.x * factor, self.y * factor, self.w * factor, self.h * factor, self.conf)

    def to_xywh(self) -> tuple[float, float, float, float]:
        """Top-left corner plus size."""
        return (self.x - self.w / 2, self.y - self.h / 2, self.w, self.h)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float, conf: float | None = None) -> "BBox":
        return cls(x + w / 2, y + h / 2, w, h, conf)


@dataclass(frozen=True)
class LossWeights:
    coord: float = 5.0
    obj: float = 1.0
    noobj: float = 0.5
    iou_target: bool = False  # confidence target = realized IoU instead of 1

    def __post_init__(self):
        if min(self.coord, self.obj, self.noobj) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.coord == self.obj == self.noobj == 0:
            raise ValueError("at least one loss weight must be nonzero")


DEFAULT_PRIORS: tuple[AnchorPrior, ...] = (
    AnchorPrior(1.0, 1.0), AnchorPrior(2.0, 2.0), AnchorPrior(3.5, 3.5),
    AnchorPrior(2.0, 4.0), AnchorPrior(4.0, 2.0),
)


def _sig(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def _logit(p: float) -> float:
    return math.log(p) - math.log1p(-p)


# --------------------------------------------------------------------------
# pair loss
# --------------------------------------------------------------------------

def bce_pair_loss(p, y) -> Tensor:
    """Mean binary cross entropy between match probabilities and labels.

    ``p`` is clamped to ``[EPS, 1-EPS]`` before the logs.  The clamp passes
    gradients straight through so a saturated sigmoid still gets pushed back.
    """
    p = nx.as_tensor(p)
    y = np.asarray(y, dtype=p.data.dtype).reshape(p.shape)
    if y.size == 0:
        raise ValueError("bce_pair_loss needs at least one prediction")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    pc = np.clip(p.data, EPS, 1 - EPS)
    n = y.size
    loss = -np.mean(y * np.log(pc) + (1 - y) * np.log1p(-pc))

    def backward(g):
        return (g * (-(y / pc) + (1 - y) / (1 - pc)) / n,)

    return nx.record(np.asarray(loss), (p,), backward, "bce_pair_loss")


# --------------------------------------------------------------------------
# anchor coding
# --------------------------------------------------------------------------

def decode_anchor(t: RawPrediction, cell: tuple[int, int], prior: AnchorPrior) -> BBox:
    tx, ty, tw, th, to = t
    cx, cy = cell
    return BBox(_sig(tx) + cx, _sig(ty) + cy, prior.pw * math.exp(tw), prior.ph * math.exp(th), _sig(to))


def encode_anchor(gt: BBox, cell: tuple[int, int], prior: AnchorPrior) -> tuple[float, float, float, float]:
    """Inverse of :func:`decode_anchor` for the four box terms."""
    cx, cy = cell
    ox, oy = gt.x - cx, gt.y - cy
    if not (0 < ox < 1 and 0 < oy < 1):
        raise ValueError(f"box centre ({gt.x}, {gt.y}) is not strictly inside cell {cell}")
    return (_logit(ox), _logit(oy), math.log(gt.w / prior.pw), math.log(gt.h / prior.ph))


def decode_grid(raw: np.ndarray, priors: Sequence[AnchorPrior]) -> np.ndarray:
    """Vectorised decode of one ``(A*5, S, S)`` map into ``(A, S, S, 5)``.

    The last axis is ``(b_x, b_y, b_w, b_h, conf)`` in grid units.
    """
    A = len(priors)
    S = raw.shape[-1]
    r = raw.reshape(A, 5, S, S)
    cy, cx = np.meshgrid(np.arange(S), np.arange(S), indexing="ij")
    pw = np.array([p.pw for p in priors])[:, None, None]
    ph = np.array([p.ph for p in priors])[:, None, None]
    sig = lambda z: 0.5 * (1.0 + np.tanh(0.5 * z))
    out = np.empty((A, S, S, 5))
    out[..., 0] = sig(r[:, 0]) + cx
    out[..., 1] = sig(r[:, 1]) + cy
    out[..., 2] = pw * np.exp(np.minimum(r[:, 2], 30.0))
    out[..., 3] = ph * np.exp(np.minimum(r[:, 3], 30.0))
    out[..., 4] = sig(r[:, 4])
    return out


# --------------------------------------------------------------------------
# target assignment
# --------------------------------------------------------------------------

def shape_iou(w1: float, h1: float, w2: float, h2: float) -> float:
    """IoU of two boxes sharing a centre."""
    inter = min(w1, w2) * min(h1, h2)
    return inter / (w1 * h1 + w2 * h2 - inter)


def cell_of(v: float, S: int) -> int:
    """Cell holding coordinate ``v``; exact boundaries go to the lower cell."""
    return min(max(math.ceil(v) - 1, 0), S - 1)


@dataclass
class TargetAssignment:
    """Per-(anchor, row, col) masks and t-space regression targets."""

    obj_mask: np.ndarray  # (A, S, S) bool
    targets: np.ndarray  # (A, S, S, 4)
    matched: np.ndarray  # (A, S, S) int, index into gts or -1
    gts: list[BBox] = field(default_factory=list)

    @property
    def noobj_mask(self) -> np.ndarray:
        return ~self.obj_mask


def assign_targets(gts: Sequence[BBox], priors: Sequence[AnchorPrior], S: int,
                   offset_clip: float = 0.01) -> TargetAssignment:
    """Mark (cell, anchor) positive when the GT centre is in the cell and
    the prior, centred on the GT, overlaps it with IoU > 0.5.

    Cell offsets are clipped to ``[offset_clip, 1-offset_clip]`` before the
    logit so boundary centres get finite targets.
    """
    A = len(priors)
    obj = np.zeros((A, S, S), dtype=bool)
    targets = np.zeros((A, S, S, 4))
    matched = np.full((A, S, S), -1, dtype=int)
    best = np.zeros((A, S, S))
    gts = list(gts)
    for g_idx, gt in enumerate(gts):
        if not (0 <= gt.x <= S and 0 <= gt.y <= S):
            raise ValueError(f"ground truth centre ({gt.x}, {gt.y}) outside the {S}x{S} grid")
        cx, cy = cell_of(gt.x, S), cell_of(gt.y, S)
        ox = min(max(gt.x - cx, offset_clip), 1 - offset_clip)
        oy = min(max(gt.y - cy, offset_clip), 1 - offset_clip)
        inner = BBox(cx + ox, cy + oy, gt.w, gt.h)
        for a, prior in enumerate(priors):
            overlap = shape_iou(gt.w, gt.h, prior.pw, prior.ph)
            if overlap > 0.5 and overlap > best[a, cy, cx]:
                best[a, cy, cx] = overlap
                obj[a, cy, cx] = True
                matched[a, cy, cx] = g_idx
                targets[a, cy, cx] = encode_anchor(inner, (cx, cy), prior)
    return TargetAssignment(obj, targets, matched, gts)


# --------------------------------------------------------------------------
# detection loss
# --------------------------------------------------------------------------

def loc_loss(pred, target: np.ndarray, mask: np.ndarray, lambda_coord: float) -> Tensor:
    """``lambda_coord * sum(mask * (target - pred)**2)`` over the 4 box terms.

    ``pred``/``target`` are ``(..., 4)`` arrays and ``mask`` has the leading shape.
    """
    pred = nx.as_tensor(pred)
    if pred.shape != target.shape or pred.shape[:-1] != mask.shape:
        raise nx.DimensionError(f"loc_loss: shapes {pred.shape}, {target.shape}, mask {mask.shape}")
    m = mask[..., None].astype(pred.data.dtype)
    diff = (pred.data - target) * m
    loss = lambda_coord * np.sum(diff ** 2)

    def backward(g):
        return (g * 2.0 * lambda_coord * diff,)

    return nx.record(np.asarray(loss), (pred,), backward, "loc_loss")


def conf_loss(conf_pred, obj_mask: np.ndarray, lambda_obj: float, lambda_noobj: float,
              conf_target: np.ndarray | None = None) -> Tensor:
    """Weighted BCE over positive and negative anchors.

    The target is 1 on positives (or ``conf_target`` there when given) and 0
    on negatives.
    """
    conf_pred = nx.as_tensor(conf_pred)
    if conf_pred.shape != obj_mask.shape:
        raise nx.DimensionError(f"conf_loss: {conf_pred.shape} vs mask {obj_mask.shape}")
    c = obj_mask.astype(conf_pred.data.dtype)
    if conf_target is not None:
        c = np.where(obj_mask, conf_target, 0.0)
    w = np.where(obj_mask, lambda_obj, lambda_noobj)
    p = np.clip(conf_pred.data, EPS, 1 - EPS)
    loss = -np.sum(w * (c * np.log(p) + (1 - c) * np.log1p(-p)))

    def backward(g):
        return (g * w * (-(c / p) + (1 - c) / (1 - p)),)

    return nx.record(np.asarray(loss), (conf_pred,), backward, "conf_loss")


def split_raw(raw: Tensor, n_anchors: int) -> tuple[Tensor, Tensor]:
    """Raw ``(B, A*5, S, S)`` -> box terms ``(B, A, S, S, 4)``, conf logits ``(B, A, S, S)``."""
    B, C, S, _ = raw.shape
    if C != n_anchors * 5:
        raise nx.DimensionError(f"raw map has {C} channels, expected {n_anchors * 5}")
    box_idx = np.array([a * 5 + k for a in range(n_anchors) for k in range(4)])
    boxes = nx.select_channels(raw, box_idx)
    boxes = _to_last(nx.reshape(boxes, (B, n_anchors, 4, S, S)))
    logits = nx.reshape(nx.select_channels(raw, np.arange(n_anchors) * 5 + 4), (B, n_anchors, S, S))
    return boxes, logits


def _to_last(x: Tensor) -> Tensor:
    """(B, A, 4, S, S) -> (B, A, S, S, 4)."""
    def backward(g):
        return (g.transpose(0, 1, 4, 2, 3),)

    return nx.record(np.ascontiguousarray(x.data.transpose(0, 1, 3, 4, 2)), (x,), backward, "to_last")


def total_detection_loss(raw: Tensor, assignments: Sequence[TargetAssignment], weights: LossWeights,
                         priors: Sequence[AnchorPrior] | None = None, mean: bool = True) -> Tensor:
    """Localisation plus confidence loss for a batch of raw maps.

    Per image the terms are summed over the grid; with ``mean`` the batch
    total is divided by the batch size.
    """
    raw = nx.as_tensor(raw)
    if raw.data.ndim == 3:
        raw = nx.reshape(raw, (1,) + raw.shape)
    B = raw.shape[0]
    if len(assignments) != B:
        raise ValueError(f"{len(assignments)} assignments for a batch of {B}")
    A = assignments[0].obj_mask.shape[0]
    boxes, logits = split_raw(raw, A)
    obj = np.stack([a.obj_mask for a in assignments])
    targets = np.stack([a.targets for a in assignments]).astype(raw.data.dtype)
    conf_target = None
    if weights.iou_target:
        if priors is None:
            raise ValueError("iou_target needs the anchor priors")
        conf_target = np.stack([_realized_iou(raw.data[i], a, priors) for i, a in enumerate(assignments)])
    loss = nx.add(loc_loss(boxes, targets, obj, weights.coord),
                  conf_loss(nx.sigmoid(logits), obj, weights.obj, weights.noobj, conf_target))
    if mean:
        loss = nx.scale(loss, 1.0 / B)
    if not np.isfinite(loss.data):
        raise NumericalError("detection loss is not finite")
    return loss


def _realized_iou(raw: np.ndarray, assignment: TargetAssignment, priors) -> np.ndarray:
    from .metrics import iou

    dec = decode_grid(raw, priors)
    out = np.zeros(assignment.obj_mask.shape)
    for a, cy, cx in zip(*np.nonzero(assignment.obj_mask)):
        gt = assignment.gts[assignment.matched[a, cy, cx]]
        bx, by, bw, bh, _ = dec[a, cy, cx]
        out[a, cy, cx] = iou(BBox(bx, by, bw, bh), gt)
    return out
