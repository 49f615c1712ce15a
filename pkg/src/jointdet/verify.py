"""Self-checks run by ``jointdet verify``.

* conv/online equivalence: the re-parameterized 1x1 kernel and the direct
  cosine path agree on random vocabularies and feature maps.
* gradient check: analytic gradients of the classification loss with respect
  to adaptor parameters, logit scale and bias match central finite
  differences in float64.

Finite differences are only meaningful where the loss is smooth across the
stencil; when a relu pre-activation flips sign between ``x - h`` and ``x + h``
the step is shrunk until it no longer does.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from . import adaptor as mlp
from .adaptor import AdaptorParams
from .boxes import GridSpec, make_anchor_centers
from .head import classify_conv, reparameterize, score_online, sigmoid
from .loss import GtInstance, LossConfig, tal_assign
from .training import cls_objective, unit_cells

EQUIV_TOL = 1e-5
GRAD_TOL = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    trials: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def check_equivalence(trials: int = 100, seed: int = 0, max_k: int = 256, max_d: int = 512) -> CheckResult:
    rng = np.random.default_rng([seed, 101])
    worst = 0.0
    for _ in range(trials):
        k = int(rng.integers(1, max_k + 1))
        d = int(rng.integers(1, max_d + 1))
        h, w = (int(v) for v in rng.integers(1, 9, size=2))
        e = rng.standard_normal((k, d)).astype(np.float32)
        x = rng.standard_normal((1, d, h, w)).astype(np.float32)
        alpha = float(rng.uniform(1.0, 30.0))
        beta = float(rng.uniform(-12.0, 2.0))
        conv = classify_conv(reparameterize(e, alpha, beta), x).data
        online = score_online(e, x, alpha, beta).data
        worst = max(worst, float(np.max(np.abs(conv - online))))
    return CheckResult("conv == online cosine", trials, worst, EQUIV_TOL)


def random_instance(rng, num_layers=3):
    """Small random training instance: params, scalars, raw embeddings, cells, assignment."""
    k = int(rng.integers(2, 9))
    d = int(rng.integers(2, 17))
    grid = GridSpec(((8, 8, 8),), 64)
    anchors = make_anchor_centers(grid)
    layers = tuple((rng.uniform(-1, 1, (d, d)) / np.sqrt(d), 0.1 * rng.standard_normal(d))
                   for _ in range(num_layers))
    params = AdaptorParams(layers, d)
    alpha = float(rng.uniform(2.0, 20.0))
    beta = float(rng.uniform(-5.0, 0.0))
    raw = rng.standard_normal((k, d))
    cells = unit_cells(rng.standard_normal((anchors.shape[0], d)))
    gts = []
    for _ in range(int(rng.integers(1, 3))):
        x1, y1 = rng.uniform(0, 40, 2)
        bw, bh = rng.uniform(10, 24, 2)
        gts.append(GtInstance((x1, y1, min(x1 + bw, 64.0), min(y1 + bh, 64.0)), int(rng.integers(k))))
    jitter = rng.uniform(-8, 8, (anchors.shape[0], 4))
    pred = np.clip(np.concatenate([anchors[:, :2] - 10, anchors[:, :2] + 10], 1) + jitter, 0, 64)
    adapted, _ = mlp._forward_cache(params, raw)
    scores = sigmoid(alpha * cells @ (adapted / np.linalg.norm(adapted, axis=1, keepdims=True)).T + beta)
    assignment = tal_assign(scores, pred, anchors, gts, LossConfig())
    return params, alpha, beta, raw, cells, assignment


def _pattern(params, raw):
    _, cache = mlp._forward_cache(params, raw)
    return [z > 0 for _, z in cache[:-1]]


def _same(p, q):
    return all(np.array_equal(a, b) for a, b in zip(p, q))


def _with_flat(params: AdaptorParams, flat: np.ndarray) -> AdaptorParams:
    layers, off, d = [], 0, params.dim
    for _ in params.layers:
        w = flat[off:off + d * d].reshape(d, d)
        off += d * d
        layers.append((w, flat[off:off + d]))
        off += d
    return AdaptorParams(tuple(layers), d)


def numeric_gradient(params, alpha, beta, raw, cells, assignment, h=1e-5):
    """Central differences over (adaptor params..., alpha, beta)."""
    theta = np.concatenate([params.flat(), [alpha, beta]])
    n = theta.size - 2

    def loss(t):
        return cls_objective(_with_flat(params, t[:n]), t[n], t[n + 1], raw, cells, assignment)[0]

    base = _pattern(params, raw)
    out = np.zeros_like(theta)
    for i in range(theta.size):
        step = h
        for _ in range(30):
            tp, tm = theta.copy(), theta.copy()
            tp[i] += step
            tm[i] -= step
            if i >= n or (_same(_pattern(_with_flat(params, tp[:n]), raw), base)
                          and _same(_pattern(_with_flat(params, tm[:n]), raw), base)):
                break
            step /= 4
        out[i] = (loss(tp) - loss(tm)) / (2 * step)
    return out


def relative_error(analytic, numeric, floor=1e-6) -> float:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def check_gradients(trials: int = 20, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng([seed, 202])
    worst = 0.0
    for _ in range(trials):
        params, alpha, beta, raw, cells, assignment = random_instance(rng)
        _, _, grads, d_alpha, d_beta = cls_objective(params, alpha, beta, raw, cells, assignment)
        analytic = np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in grads]
                                  + [[d_alpha, d_beta]])
        numeric = numeric_gradient(params, alpha, beta, raw, cells, assignment)
        worst = max(worst, relative_error(analytic, numeric))
    return CheckResult("loss -> adaptor gradient", trials, worst, GRAD_TOL)


def run_all(seed: int = 0, equivalence_trials: int = 100, gradient_trials: int = 20) -> List[CheckResult]:
    return [check_equivalence(equivalence_trials, seed), check_gradients(gradient_trials, seed)]


def format_table(results: List[CheckResult]) -> str:
    lines = [f"{'check':<28} {'trials':>6} {'max error':>12} {'tol':>8}  result"]
    for r in results:
        lines.append(f"{r.name:<28} {r.trials:>6} {r.max_error:>12.3e} {r.tolerance:>8.0e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
