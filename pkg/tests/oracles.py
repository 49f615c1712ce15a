"""Exhaustive pure-Python references shared by the unit and acceptance tests."""

import math

import numpy as np

from conftest import scalar_iou


def brute_nms(boxes, scores, classes, iou_thresh=0.7, score_thresh=0.25, per_class=True):
    items = [(float(scores[i]), int(classes[i]), i) for i in range(len(scores))
             if scores[i] >= score_thresh]
    items.sort(key=lambda t: (-t[0], t[1], t[2]))
    kept = []
    for _, c, i in items:
        suppressed = False
        for j in kept:
            if per_class and int(classes[j]) != c:
                continue
            if scalar_iou(boxes[j], boxes[i]) > iou_thresh:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    return kept


def random_nms_instance(rng, n_max=20):
    n = int(rng.integers(0, n_max + 1))
    xy = rng.integers(0, 40, (n, 2)).astype(float)
    wh = rng.integers(2, 20, (n, 2)).astype(float)
    boxes = np.concatenate([xy, xy + wh], 1)
    if n > 2:  # exact duplicates exercise the ordering tie-breaks
        boxes[1] = boxes[0]
    scores = rng.choice([0.2, 0.25, 0.5, 0.75, 0.9, 1.0], n)
    classes = rng.integers(0, 3, n)
    return boxes, scores, classes


def brute_tal(scores, pred, anchors, gts, alpha=0.5, beta=6.0, topk=10):
    """Returns (gt_index, metric, target) as plain lists."""
    num_a = len(pred)
    t = {}
    chosen = {}
    for g, gt in enumerate(gts):
        x1, y1, x2, y2 = gt.box
        cand = []
        for a in range(num_a):
            cx, cy = anchors[a][0], anchors[a][1]
            if x1 < cx < x2 and y1 < cy < y2:
                u = scalar_iou(gt.box, pred[a])
                t[g, a] = float(scores[a][gt.class_index]) ** alpha * u ** beta
                cand.append(a)
        cand.sort(key=lambda a: (-t[g, a], a))
        chosen[g] = set(cand[:topk])
    gt_index, metric = [-1] * num_a, [0.0] * num_a
    for a in range(num_a):
        best = None
        for g in range(len(gts)):
            if a in chosen[g] and (best is None or t[g, a] > t[best, a]):
                best = g
        if best is not None:
            gt_index[a], metric[a] = best, t[best, a]
    target = [0.0] * num_a
    for g, gt in enumerate(gts):
        mine = [a for a in range(num_a) if gt_index[a] == g]
        if not mine:
            continue
        max_t = max(metric[a] for a in mine)
        max_u = max(scalar_iou(gt.box, pred[a]) for a in mine)
        if max_t > 0:
            for a in mine:
                target[a] = metric[a] / max_t * max_u
    return gt_index, metric, target


def random_tal_instance(rng, max_anchors=12, max_gts=2, num_classes=3):
    from jointdet.loss import GtInstance

    a = int(rng.integers(1, max_anchors + 1))
    centers = rng.integers(0, 8, (a, 2)) * 4.0 + 2.0
    anchors = np.concatenate([centers, np.full((a, 1), 8.0)], 1)
    jitter = rng.integers(-4, 5, (a, 4)).astype(float)
    pred = np.concatenate([centers - 6, centers + 6], 1) + jitter
    pred[:, 2:] = np.maximum(pred[:, 2:], pred[:, :2] + 1)
    scores = rng.choice([0.1, 0.3, 0.5, 0.9], (a, num_classes))
    gts = []
    for _ in range(int(rng.integers(0, max_gts + 1))):
        x1, y1 = rng.integers(0, 24, 2).astype(float)
        w, h = rng.integers(4, 20, 2).astype(float)
        gts.append(GtInstance((x1, y1, x1 + w, y1 + h), int(rng.integers(num_classes))))
    return scores, pred, anchors, gts


def tal_matches(res, ref, tol=1e-12):
    gi, metric, target = ref
    return (list(res.gt_index) == gi
            and all(math.isclose(x, y, rel_tol=tol, abs_tol=tol) for x, y in zip(res.metric, metric))
            and all(math.isclose(x, y, rel_tol=tol, abs_tol=tol) for x, y in zip(res.target, target)))
