"""Anchor-free box decoding and non-maximum suppression.

Boxes are regressed as four side distances (left, top, right, bottom) in
stride units, each predicted as a distribution over ``REG_MAX`` integer bins
whose expectation is the distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import DataError, ShapeError

REG_MAX = 16


@dataclass(frozen=True)
class GridSpec:
    levels: tuple  # ((stride, H, W), ...)
    image_size: int

    def __post_init__(self):
        levels = tuple((int(s), int(h), int(w)) for s, h, w in self.levels)
        strides = [s for s, _, _ in levels]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ValueError(f"strides must be strictly increasing, got {strides}")
        for s, h, w in levels:
            cap = math.ceil(self.image_size / s)
            if h > cap or w > cap:
                raise ValueError(f"level stride {s}: {h}x{w} exceeds image size {self.image_size}")
        object.__setattr__(self, "levels", levels)

    @classmethod
    def for_image(cls, image_size: int, strides=(8, 16, 32)) -> "GridSpec":
        return cls(tuple((s, math.ceil(image_size / s), math.ceil(image_size / s)) for s in strides),
                   image_size)

    @property
    def num_anchors(self) -> int:
        return sum(h * w for _, h, w in self.levels)

    def level_slices(self) -> List[slice]:
        out, start = [], 0
        for _, h, w in self.levels:
            out.append(slice(start, start + h * w))
            start += h * w
        return out


@dataclass(frozen=True)
class Detection:
    box: tuple  # x1, y1, x2, y2 in pixels
    score: float
    class_index: int
    label: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "box": [float(v) for v in self.box],
            "score": float(self.score),
            "label": self.label,
            "class_index": int(self.class_index),
        }


def make_anchor_centers(grid: GridSpec) -> np.ndarray:
    """(A, 3) array of ``(cx, cy, stride)``, level-major then row-major."""
    parts = []
    for s, h, w in grid.levels:
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        parts.append(np.stack([(xs.ravel() + 0.5) * s, (ys.ravel() + 0.5) * s,
                               np.full(h * w, float(s))], axis=1))
    if not parts:
        return np.zeros((0, 3))
    return np.concatenate(parts)


def dfl_decode(dist, reg_max: int = REG_MAX) -> np.ndarray:
    """Expected bin index per side: (..., 4*reg_max) or (..., 4, reg_max) -> (..., 4)."""
    x = np.asarray(dist, dtype=np.float64)
    if x.shape[-1] != reg_max:
        if x.shape[-1] != 4 * reg_max:
            raise ShapeError(f"expected 4 x {reg_max} bin logits per anchor, got shape {x.shape}")
        x = x.reshape(x.shape[:-1] + (4, reg_max))
    if x.shape[-2] != 4:
        raise ShapeError(f"expected 4 sides, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite distribution logits")
    p = np.exp(x - x.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    return p @ np.arange(reg_max, dtype=np.float64)


def decode_boxes(centers, ltrb, stride, image_size=None) -> np.ndarray:
    c = np.asarray(centers, dtype=np.float64)[:, :2]
    d = np.asarray(ltrb, dtype=np.float64)
    if d.shape != (c.shape[0], 4):
        raise ShapeError(f"{c.shape[0]} centers but distances of shape {d.shape}")
    s = np.broadcast_to(np.asarray(stride, dtype=np.float64), (c.shape[0],))[:, None]
    boxes = np.concatenate([c - d[:, :2] * s, c + d[:, 2:] * s], axis=1)
    if image_size is not None:
        np.clip(boxes, 0.0, float(image_size), out=boxes)
    return boxes


def encode_ltrb(centers, boxes, stride) -> np.ndarray:
    """Inverse of :func:`decode_boxes` for unclipped boxes."""
    c = np.asarray(centers, dtype=np.float64)[:, :2]
    b = np.asarray(boxes, dtype=np.float64)
    s = np.broadcast_to(np.asarray(stride, dtype=np.float64), (c.shape[0],))[:, None]
    return np.concatenate([c - b[:, :2], b[:, 2:] - c], axis=1) / s


def box_area(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)


def box_iou(a, b) -> np.ndarray:
    """Pairwise IoU, (N, 4) x (M, 4) -> (N, M). Empty unions give 0."""
    a = np.asarray(a, dtype=np.float64)[:, None, :]
    b = np.asarray(b, dtype=np.float64)[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def nms_order(scores, classes) -> np.ndarray:
    """Score descending, then lower class index, then lower position."""
    scores = np.asarray(scores, dtype=np.float64)
    idx = np.arange(scores.shape[0])
    return np.lexsort((idx, np.asarray(classes), -scores))


def nms_indices(boxes, scores, classes, iou_thresh=0.7, score_thresh=0.25,
                per_class=True, max_det=300) -> np.ndarray:
    """Greedy NMS over arrays; returns kept indices in output order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).ravel()
    classes = np.asarray(classes, dtype=np.int64).ravel()
    order = nms_order(scores, classes)
    order = order[scores[order] >= score_thresh]
    alive = np.ones(order.shape[0], dtype=bool)
    keep = []
    for pos in range(order.shape[0]):
        if not alive[pos]:
            continue
        i = order[pos]
        keep.append(i)
        if len(keep) >= max_det:
            break
        rest = order[pos + 1:]
        if rest.size == 0:
            break
        hit = box_iou(boxes[i:i + 1], boxes[rest])[0] > iou_thresh
        if per_class:
            hit &= classes[rest] == classes[i]
        alive[pos + 1:] &= ~hit
    return np.asarray(keep, dtype=np.int64)


def nms(dets: Sequence[Detection], iou_thresh=0.7, score_thresh=0.25, per_class=True,
        max_det=300) -> List[Detection]:
    if not dets:
        return []
    keep = nms_indices([d.box for d in dets], [d.score for d in dets],
                       [d.class_index for d in dets], iou_thresh, score_thresh, per_class, max_det)
    return [dets[i] for i in keep]
