"""Toy-scale adaptor training on synthetic scenes.

Only the adaptor and the scalar logit scale/bias learn; scene features and box
predictions are frozen inputs. Each step assigns anchors with TAL on the
current scores, then takes one plain gradient-descent step on the weighted
classification loss (the box terms carry no gradient to the text side).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import adaptor as mlp
from .adaptor import AdaptorParams
from .boxes import decode_boxes, dfl_decode
from .head import DEFAULT_LOGIT_BIAS, DEFAULT_LOGIT_SCALE, sigmoid, unit_rows
from .loss import LossConfig, LossParts, cls_loss, dfl_loss, iou_loss, tal_assign, total_loss
from .errors import ShapeError, TrainingError

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss_cls", "loss_iou", "loss_dfl", "loss_total", "acc")


def unit_cells(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 1e-12)


def cls_objective(params: AdaptorParams, alpha, beta, raw, cells, assignment):
    """Classification loss of one scene and its gradients.

    ``cells`` are unit-normalized (A, D) features. Returns
    ``(loss, logits, layer_grads, d_alpha, d_beta)``.
    """
    adapted, _ = mlp._forward_cache(params, raw)
    norms = np.linalg.norm(adapted, axis=1, keepdims=True)
    e_hat = unit_rows(adapted)
    cos = cells @ e_hat.T
    logits = alpha * cos + beta
    loss, g = cls_loss(logits, assignment)
    d_alpha = float(np.sum(g * cos))
    d_beta = float(np.sum(g))
    d_hat = alpha * (g.T @ cells)
    d_adapted = (d_hat - e_hat * np.sum(e_hat * d_hat, axis=1, keepdims=True)) / norms
    layer_grads, _ = mlp.backward(params, raw, d_adapted)
    return loss, logits, layer_grads, d_alpha, d_beta


@dataclass
class _Prepared:
    cells: np.ndarray
    anchors: np.ndarray
    pred_boxes: np.ndarray
    box_logits: np.ndarray
    gts: tuple


def prepare_scene(scene) -> _Prepared:
    anchors = scene.anchors()
    ltrb = dfl_decode(scene.box_logits)
    boxes = decode_boxes(anchors, ltrb, anchors[:, 2], scene.image_size)
    return _Prepared(unit_cells(scene.flat_features()), anchors, boxes, scene.box_logits,
                     scene.gts)


@dataclass
class TrainResult:
    params: AdaptorParams
    logit_scale: float
    logit_bias: float
    history: List[dict] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([h["loss_total"] for h in self.history])


def _append_log(path, rows):
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def train_adaptor(params: AdaptorParams, raw_embeddings, scenes: Sequence, cfg: LossConfig = LossConfig(),
                  steps: int = 200, lr: float = 1e-2, logit_scale: float = DEFAULT_LOGIT_SCALE,
                  logit_bias: float = DEFAULT_LOGIT_BIAS, train_scalars: bool = True,
                  log_path: Optional[str] = None) -> TrainResult:
    """Gradient descent on the adaptor (and scale/bias) over ``scenes`` cyclically.

    Deterministic: scene ``step % len(scenes)`` is used at each step. With
    ``lr == 0`` the returned parameters are bit-identical to the input.
    """
    raw = np.asarray(raw_embeddings, dtype=np.float64)
    if raw.shape[1] != params.dim:
        raise ShapeError(f"embedding dim {raw.shape[1]} != adaptor dim {params.dim}")
    if not scenes:
        raise ValueError("no training scenes")
    prepared = [prepare_scene(s) for s in scenes]
    if prepared[0].cells.shape[1] != params.dim:
        raise ShapeError(f"scene features have width {prepared[0].cells.shape[1]}, "
                         f"adaptor expects {params.dim}")
    dtype = params.layers[0][0].dtype if params.layers else np.float32
    work = params.astype(np.float64)
    alpha, beta = float(logit_scale), float(logit_bias)
    history = []
    last_finite = -1
    for step in range(steps):
        sc = prepared[step % len(prepared)]
        adapted, _ = mlp._forward_cache(work, raw)
        logits = alpha * (sc.cells @ unit_rows(adapted).T) + beta
        assignment = tal_assign(sigmoid(logits), sc.pred_boxes, sc.anchors, sc.gts, cfg)
        loss_c, _, grads, d_alpha, d_beta = cls_objective(work, alpha, beta, raw, sc.cells,
                                                          assignment)
        parts = LossParts(loss_c, iou_loss(sc.pred_boxes, assignment, sc.gts),
                          dfl_loss(sc.box_logits, assignment, sc.gts, sc.anchors))
        total = total_loss(parts, cfg)
        if not np.isfinite(total):
            raise TrainingError(f"loss became non-finite at step {step}", last_finite)
        pos = assignment.positive
        acc = float(np.mean(np.argmax(logits[pos], axis=1) == assignment.labels[pos])) if pos.any() else 0.0
        history.append({"step": step, "loss_cls": parts.cls, "loss_iou": parts.iou,
                        "loss_dfl": parts.dfl, "loss_total": total, "acc": acc})
        last_finite = step
        if lr == 0:
            continue
        scale = lr * cfg.lambda_cls
        work = AdaptorParams(
            tuple((w - scale * dw, b - scale * db) for (w, b), (dw, db) in zip(work.layers, grads)),
            work.dim,
        )
        if train_scalars:
            alpha = max(alpha - scale * d_alpha, 1e-3)
            beta = beta - scale * d_beta
    if log_path is not None:
        _append_log(log_path, history)
    out = params if lr == 0 else work.astype(dtype)
    if lr == 0:
        alpha, beta = float(logit_scale), float(logit_bias)
    return TrainResult(out, alpha, beta, history)


def scene_scores(params: AdaptorParams, logit_scale, logit_bias, raw, scenes) -> List[np.ndarray]:
    """Per-scene (A, K) logits through the online cosine path."""
    adapted, _ = mlp._forward_cache(params, np.asarray(raw))
    e_hat = unit_rows(adapted)
    return [logit_scale * (unit_cells(s.flat_features()) @ e_hat.T) + logit_bias for s in scenes]


def layer_sweep(raw, train_scenes, eval_scenes, layers=(0, 1, 2, 3, 4, 5), steps=300,
                lr=1e-2, seed=0, cfg: LossConfig = LossConfig()) -> dict:
    """Train one adaptor per depth and report held-out cell accuracy per depth."""
    from .adaptor import AdaptorConfig, init_params
    from .synth import cell_accuracy

    dim = np.asarray(raw).shape[1]
    out = {}
    for n in layers:
        res = train_adaptor(init_params(AdaptorConfig(n, dim, seed)), raw, train_scenes, cfg,
                            steps, lr)
        scores = scene_scores(res.params, res.logit_scale, res.logit_bias, raw, eval_scenes)
        out[n] = cell_accuracy(scores, eval_scenes)
        log.info("layers=%d accuracy=%.4f final_loss=%.4f", n, out[n], res.losses[-1])
    return out
