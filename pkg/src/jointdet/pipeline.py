"""Single-image detection: score cells, decode boxes, suppress duplicates."""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .boxes import Detection, GridSpec, decode_boxes, dfl_decode, make_anchor_centers, nms_indices
from .errors import ShapeError
from .head import FeatureMap
from .quant import classify

SCORE_THRESH = 0.25
EVAL_SCORE_THRESH = 0.001
IOU_THRESH = 0.7


def cell_probabilities(classifier, features: Sequence[FeatureMap]) -> np.ndarray:
    """(A, K) sigmoid scores over all levels in anchor order (batch of one)."""
    parts = []
    for f in features:
        if f.shape[0] != 1:
            raise ShapeError(f"detect handles one image at a time, got batch {f.shape[0]}")
        p = classify(classifier, f, "sigmoid").data[0]
        parts.append(p.reshape(p.shape[0], -1).T)
    return np.concatenate(parts)


def detect(classifier, features: Sequence[FeatureMap], box_logits, image_size: int,
           score_thresh=SCORE_THRESH, iou_thresh=IOU_THRESH, max_det=300,
           per_class=True) -> List[Detection]:
    """Multi-label detection over every (anchor, class) pair above ``score_thresh``."""
    grid = GridSpec(tuple((f.stride, f.shape[2], f.shape[3]) for f in features), image_size)
    anchors = make_anchor_centers(grid)
    box_logits = np.asarray(box_logits)
    if box_logits.shape[0] != anchors.shape[0]:
        raise ShapeError(f"{box_logits.shape[0]} box predictions for {anchors.shape[0]} anchors")
    probs = cell_probabilities(classifier, features)
    a_idx, c_idx = np.nonzero(probs >= score_thresh)
    if a_idx.size == 0:
        return []
    boxes = decode_boxes(anchors[a_idx], dfl_decode(box_logits[a_idx]), anchors[a_idx, 2],
                         image_size)
    scores = probs[a_idx, c_idx]
    keep = nms_indices(boxes, scores, c_idx, iou_thresh, score_thresh, per_class, max_det)
    labels = classifier.labels
    return [Detection(tuple(float(v) for v in boxes[i]), float(scores[i]), int(c_idx[i]),
                      labels[c_idx[i]]) for i in keep]


def detect_scene(classifier, scene, **kwargs) -> List[Detection]:
    return detect(classifier, scene.features, scene.box_logits, scene.image_size, **kwargs)
