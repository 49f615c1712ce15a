"""Latency/FPS harness for the classification head.

Two paths are timed per iteration:

* ``offline``: the prebuilt pack (optionally quantized) scores the feature
  pyramid, then boxes are decoded and suppressed.
* ``online``: as offline, but the adaptor is re-run and the pack rebuilt on
  every iteration, as if prompts were re-encoded per frame.

``threads`` workers run concurrently, each with private feature buffers and
the shared immutable pack. BLAS is pinned to one thread while timing so the
worker count is the only parallelism axis. Timings use ``perf_counter_ns``;
the reported mean is a median of block means.
"""

from __future__ import annotations

import csv
import io
import os
import platform
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import adaptor as mlp
from .boxes import REG_MAX, GridSpec
from .errors import ResourceError, ShapeError
from .head import FeatureMap, reparameterize
from .pipeline import detect
from .quant import quantize_kernel

PATHS = ("offline", "online")
MODES = ("float", "int8", "int16")


@dataclass(frozen=True)
class BenchConfig:
    path: str = "offline"
    K: int = 80
    threads: int = 1
    mode: str = "float"
    image_size: int = 320
    strides: tuple = (8, 16, 32)
    iterations: int = 30
    warmup: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.path not in PATHS:
            raise ValueError(f"path must be one of {PATHS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 1 <= self.threads <= 64:
            raise ValueError("threads must be in [1, 64]")
        if self.iterations < 30 or self.warmup < 5:
            raise ValueError("need iterations >= 30 and warmup >= 5")

    @property
    def grid(self) -> GridSpec:
        return GridSpec.for_image(self.image_size, self.strides)


@dataclass(frozen=True)
class BenchResult:
    path: str
    K: int
    threads: int
    mode: str
    mean_us: float
    p50_us: float
    p90_us: float
    fps: float
    aggregate_fps: float
    iterations: int
    adaptor_calls: int
    fingerprint: str
    samples_per_worker: tuple = field(default=(), repr=False)


def machine_fingerprint() -> str:
    return (f"{platform.machine()}|{platform.processor() or 'cpu'}|cpus={os.cpu_count()}"
            f"|py={platform.python_version()}|numpy={np.__version__}")


def median_of_means(samples, blocks: int = 5) -> float:
    x = np.asarray(samples, dtype=np.float64)
    blocks = max(1, min(blocks, x.size))
    return float(np.median([b.mean() for b in np.array_split(x, blocks)]))


def _worker_inputs(cfg: BenchConfig, dim: int, worker: int):
    rng = np.random.default_rng([cfg.seed, worker])
    feats = tuple(FeatureMap(rng.standard_normal((1, dim, h, w)).astype(np.float32), s, i)
                  for i, (s, h, w) in enumerate(cfg.grid.levels))
    box_logits = rng.standard_normal((cfg.grid.num_anchors, 4 * REG_MAX)).astype(np.float32)
    return feats, box_logits


def run_bench(cfg: BenchConfig, pack, adaptor=None, raw_embeddings=None) -> BenchResult:
    if pack.num_classes != cfg.K:
        raise ShapeError(f"pack has {pack.num_classes} classes, config asks for K={cfg.K}")
    if cfg.path == "online":
        if adaptor is None or raw_embeddings is None:
            raise ValueError("online path needs the adaptor and raw embeddings")
        if raw_embeddings.rows != cfg.K or raw_embeddings.dims != adaptor.dim:
            raise ShapeError("raw embeddings do not match K / adaptor dim")
    classifier = pack if cfg.mode == "float" else quantize_kernel(pack, cfg.mode)
    alpha, beta = pack.logit_scale, pack.logit_bias

    def step(feats, box_logits):
        clf = classifier
        if cfg.path == "online":
            clf = reparameterize(mlp.forward(adaptor, raw_embeddings), alpha, beta)
            if cfg.mode != "float":
                clf = quantize_kernel(clf, cfg.mode)
        detect(clf, feats, box_logits, cfg.image_size)

    samples: List[List[int]] = [[] for _ in range(cfg.threads)]
    calls = [0] * cfg.threads
    errors = []

    def work(w):
        try:
            feats, box_logits = _worker_inputs(cfg, pack.dim, w)
            for _ in range(cfg.warmup):
                step(feats, box_logits)
            before = mlp.forward_calls.local_count()
            out = samples[w]
            for _ in range(cfg.iterations):
                t0 = time.perf_counter_ns()
                step(feats, box_logits)
                out.append(time.perf_counter_ns() - t0)
            calls[w] = mlp.forward_calls.local_count() - before
        except Exception as exc:  # surfaced after join
            errors.append(exc)

    with threadpool_limits(limits=1):
        workers = [threading.Thread(target=work, args=(w,), name=f"bench-{w}")
                   for w in range(cfg.threads)]
        try:
            for t in workers:
                t.start()
        except RuntimeError as exc:
            raise ResourceError(f"could not start {cfg.threads} bench workers: {exc}") from exc
        for t in workers:
            t.join()
    if errors:
        raise errors[0]

    pooled = np.concatenate([np.asarray(s, dtype=np.float64) for s in samples]) / 1e3
    mean_us = median_of_means(pooled)
    aggregate = sum(1e6 / (median_of_means(s) / 1e3) for s in samples)
    return BenchResult(
        cfg.path, cfg.K, cfg.threads, cfg.mode, mean_us,
        float(np.percentile(pooled, 50)), float(np.percentile(pooled, 90)),
        1e6 / mean_us, aggregate, cfg.iterations, sum(calls), machine_fingerprint(),
        tuple(len(s) for s in samples),
    )


REPORT_COLUMNS = ("path", "K", "threads", "mode", "mean_us", "p50_us", "p90_us", "fps",
                  "aggregate_fps", "iterations", "adaptor_calls", "fingerprint")


def emit_report(results: Sequence[BenchResult], csv_path: Optional[str] = None) -> str:
    """Aligned text table (returned) and optional CSV, keyed by (path, K, threads, mode)."""
    rows = sorted(results, key=lambda r: (r.path, r.K, r.threads, r.mode))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in rows:
                d = asdict(r)
                w.writerow([d[c] for c in REPORT_COLUMNS])
    head = f"{'path':<8} {'K':>5} {'thr':>4} {'mode':<6} {'mean us':>11} {'p50 us':>11} " \
           f"{'p90 us':>11} {'FPS':>9} {'agg FPS':>9}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.path:<8} {r.K:>5} {r.threads:>4} {r.mode:<6} {r.mean_us:>11.1f} "
                     f"{r.p50_us:>11.1f} {r.p90_us:>11.1f} {r.fps:>9.2f} {r.aggregate_fps:>9.2f}")
    return "\n".join(lines)
