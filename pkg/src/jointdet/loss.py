"""Task-aligned label assignment and the three-term detection loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .boxes import REG_MAX, box_iou, encode_ltrb
from .errors import ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GtInstance:
    box: tuple
    class_index: int

    def __post_init__(self):
        x1, y1, x2, y2 = (float(v) for v in self.box)
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"ground-truth box {self.box} has no area")
        if self.class_index < 0:
            raise ValueError(f"negative class index {self.class_index}")
        object.__setattr__(self, "box", (x1, y1, x2, y2))


@dataclass(frozen=True)
class LossConfig:
    lambda_cls: float = 0.5
    lambda_iou: float = 7.5
    lambda_dfl: float = 1.5
    tal_alpha: float = 0.5
    tal_beta: float = 6.0
    tal_topk: int = 10

    def __post_init__(self):
        lams = (self.lambda_cls, self.lambda_iou, self.lambda_dfl)
        if min(lams) < 0 or max(lams) <= 0:
            raise ValueError(f"loss weights must be >= 0 with at least one > 0, got {lams}")
        if self.tal_topk < 1:
            raise ValueError("tal_topk must be >= 1")


@dataclass(frozen=True)
class AssignmentResult:
    gt_index: np.ndarray  # (A,) int, -1 for background
    metric: np.ndarray    # (A,) alignment metric t w.r.t. the matched gt, 0 for background
    target: np.ndarray    # (A,) normalized soft target, 0 for background
    labels: np.ndarray    # (A,) class index of the matched gt, -1 for background

    @property
    def positive(self) -> np.ndarray:
        return self.gt_index >= 0

    def target_scores(self, num_classes: int) -> np.ndarray:
        out = np.zeros((self.gt_index.shape[0], num_classes))
        pos = np.flatnonzero(self.positive)
        out[pos, self.labels[pos]] = self.target[pos]
        return out


class LossParts(NamedTuple):
    cls: float
    iou: float
    dfl: float


def _background(num_anchors: int) -> AssignmentResult:
    return AssignmentResult(np.full(num_anchors, -1), np.zeros(num_anchors),
                            np.zeros(num_anchors), np.full(num_anchors, -1))


def centers_inside(anchors, gt_boxes) -> np.ndarray:
    """(G, A) mask of anchor centers strictly inside each gt box."""
    c = np.asarray(anchors, dtype=np.float64)[:, :2]
    g = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    return ((c[None, :, 0] > g[:, None, 0]) & (c[None, :, 0] < g[:, None, 2])
            & (c[None, :, 1] > g[:, None, 1]) & (c[None, :, 1] < g[:, None, 3]))


def tal_assign(scores, pred_boxes, anchors, gts: Sequence[GtInstance],
               cfg: LossConfig = LossConfig()) -> AssignmentResult:
    """Match anchors to ground truths by ``t = s**alpha * iou**beta``.

    ``scores`` are per-anchor class probabilities (A, K). Candidates for a gt
    are anchors whose center lies inside its box; each gt keeps its top-k
    candidates by t (ties: lower anchor index). An anchor claimed by several
    gts goes to the one with the larger t (ties: lower gt index). Soft targets
    are t rescaled so each gt's best positive gets that gt's best IoU.
    """
    scores = np.asarray(scores, dtype=np.float64)
    pred = np.asarray(pred_boxes, dtype=np.float64)
    num_anchors = scores.shape[0]
    if pred.shape != (num_anchors, 4) or np.asarray(anchors).shape[0] != num_anchors:
        raise ShapeError("scores, pred_boxes and anchors must be aligned")
    if not gts:
        return _background(num_anchors)
    gt_boxes = np.array([g.box for g in gts])
    gt_cls = np.array([g.class_index for g in gts])
    if gt_cls.max() >= scores.shape[1]:
        raise ShapeError(f"gt class {gt_cls.max()} outside {scores.shape[1]} classes")

    inside = centers_inside(anchors, gt_boxes)
    iou = box_iou(gt_boxes, pred)
    t = scores[:, gt_cls].T ** cfg.tal_alpha * iou ** cfg.tal_beta * inside

    chosen = np.zeros_like(inside)
    idx = np.arange(num_anchors)
    for g in range(len(gts)):
        cand = idx[inside[g]]
        order = np.lexsort((cand, -t[g, cand]))
        chosen[g, cand[order[:cfg.tal_topk]]] = True

    masked = np.where(chosen, t, -1.0)
    owner = np.argmax(masked, axis=0)  # first max wins -> lower gt index on ties
    gt_index = np.where(chosen.any(axis=0), owner, -1)
    pos = gt_index >= 0

    metric = np.zeros(num_anchors)
    metric[pos] = t[gt_index[pos], idx[pos]]
    pos_iou = np.zeros(num_anchors)
    pos_iou[pos] = iou[gt_index[pos], idx[pos]]
    target = np.zeros(num_anchors)
    for g in range(len(gts)):
        mine = gt_index == g
        if not mine.any():
            continue
        max_t = metric[mine].max()
        if max_t > 0:
            target[mine] = metric[mine] / max_t * pos_iou[mine].max()
    labels = np.where(pos, gt_cls[np.maximum(gt_index, 0)], -1)
    return AssignmentResult(gt_index, metric, target, labels)


def cls_loss(logits, assignment: AssignmentResult):
    """Sigmoid BCE against soft targets, normalized by max(target mass, 1).

    Returns ``(loss, d loss / d logits)``.
    """
    x = np.asarray(logits, dtype=np.float64)
    y = assignment.target_scores(x.shape[1])
    mass = max(y.sum(), 1.0)
    bce = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    grad = (0.5 * (1.0 + np.tanh(0.5 * x)) - y) / mass
    return float(bce.sum() / mass), grad


def ciou(pred, gt) -> np.ndarray:
    """Elementwise complete-IoU of aligned (N, 4) box arrays."""
    p = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    wp, hp = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    wg, hg = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
    iw = np.clip(np.minimum(p[:, 2], g[:, 2]) - np.maximum(p[:, 0], g[:, 0]), 0, None)
    ih = np.clip(np.minimum(p[:, 3], g[:, 3]) - np.maximum(p[:, 1], g[:, 1]), 0, None)
    inter = iw * ih
    union = wp * hp + wg * hg - inter
    iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    cw = np.maximum(p[:, 2], g[:, 2]) - np.minimum(p[:, 0], g[:, 0])
    ch = np.maximum(p[:, 3], g[:, 3]) - np.minimum(p[:, 1], g[:, 1])
    c2 = cw ** 2 + ch ** 2
    rho2 = ((g[:, 0] + g[:, 2] - p[:, 0] - p[:, 2]) ** 2
            + (g[:, 1] + g[:, 3] - p[:, 1] - p[:, 3]) ** 2) / 4.0
    dist = np.divide(rho2, c2, out=np.zeros_like(rho2), where=c2 > 0)
    v = 4.0 / np.pi ** 2 * (np.arctan2(wg, hg) - np.arctan2(wp, hp)) ** 2
    denom = v - iou + 1.0
    a = np.divide(v, denom, out=np.zeros_like(v), where=denom > 0)
    return iou - dist - a * v


def iou_loss(pred_boxes, assignment: AssignmentResult, gts: Sequence[GtInstance]) -> float:
    """Soft-target-weighted mean of ``1 - CIoU`` over positive anchors."""
    pos = np.flatnonzero(assignment.positive)
    w = assignment.target[pos]
    if pos.size == 0 or w.sum() <= 0:
        return 0.0
    gt_boxes = np.array([g.box for g in gts])[assignment.gt_index[pos]]
    c = ciou(np.asarray(pred_boxes, dtype=np.float64)[pos], gt_boxes)
    return float(np.sum(w * (1.0 - c)) / w.sum())


def dfl_targets(anchors, boxes, reg_max=REG_MAX) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64)
    d = encode_ltrb(anchors, boxes, anchors[:, 2])
    clipped = np.clip(d, 0.0, reg_max - 1)
    if np.any(clipped != d):
        log.info("clamped %d side targets into [0, %d]", int(np.sum(clipped != d)), reg_max - 1)
    return clipped


def dfl_loss(dist, assignment: AssignmentResult, gts: Sequence[GtInstance], anchors,
             reg_max=REG_MAX) -> float:
    """Cross-entropy on the two bins bracketing each side distance.

    The two bins are weighted linearly by proximity; sides are averaged per
    anchor, anchors averaged with soft-target weights.
    """
    pos = np.flatnonzero(assignment.positive)
    w = assignment.target[pos]
    if pos.size == 0 or w.sum() <= 0:
        return 0.0
    logits = np.asarray(dist, dtype=np.float64).reshape(-1, 4, reg_max)[pos]
    gt_boxes = np.array([g.box for g in gts])[assignment.gt_index[pos]]
    d = dfl_targets(np.asarray(anchors)[pos], gt_boxes, reg_max)
    lo = np.minimum(np.floor(d), reg_max - 2).astype(np.int64)
    w_hi = d - lo
    m = logits.max(axis=-1, keepdims=True)
    logp = logits - (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))
    ce_lo = -np.take_along_axis(logp, lo[..., None], -1)[..., 0]
    ce_hi = -np.take_along_axis(logp, lo[..., None] + 1, -1)[..., 0]
    per_anchor = ((1.0 - w_hi) * ce_lo + w_hi * ce_hi).mean(axis=1)
    return float(np.sum(w * per_anchor) / w.sum())


def total_loss(parts: LossParts, cfg: LossConfig = LossConfig()) -> float:
    cls_, iou_, dfl_ = parts
    return cfg.lambda_cls * cls_ + cfg.lambda_iou * iou_ + cfg.lambda_dfl * dfl_
