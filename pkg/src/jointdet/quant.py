"""Weights-only symmetric per-row INT8/INT16 quantization of vocabulary kernels.

Each kernel row gets its own scale ``max|row| / limit`` (1 for zero rows);
values are rounded half away from zero. Activations stay floating point and
the scale is applied after the integer-weight accumulation.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeError
from .head import ScoreMap, VocabularyPack, _feature_array, classify_conv, normalize_cells

LIMITS = {"int8": 127, "int16": 32767}
DTYPES = {"int8": np.int8, "int16": np.int16}


@dataclass(frozen=True)
class QuantizedKernel:
    mode: str
    values: np.ndarray   # K x D int8 / int16
    scales: np.ndarray   # K float32
    logit_bias: float
    labels: tuple = ()
    logit_scale: float = 1.0

    def __post_init__(self):
        if self.mode not in LIMITS:
            raise ValueError(f"mode must be int8 or int16, got {self.mode!r}")
        values = np.ascontiguousarray(self.values, dtype=DTYPES[self.mode])
        scales = np.ascontiguousarray(self.scales, dtype=np.float32)
        if values.ndim != 2 or scales.shape != (values.shape[0],):
            raise ShapeError(f"values {values.shape} and scales {scales.shape} disagree")
        if np.any(scales <= 0):
            raise ValueError("quantization scales must be positive")
        labels = tuple(self.labels) or tuple(f"class_{i}" for i in range(values.shape[0]))
        if len(labels) != values.shape[0]:
            raise ShapeError(f"{len(labels)} labels for {values.shape[0]} rows")
        values.setflags(write=False)
        scales.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "logit_bias", float(self.logit_bias))
        object.__setattr__(self, "logit_scale", float(self.logit_scale))

    @property
    def quantization(self) -> str:
        return self.mode

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def equal(self, other) -> bool:
        return (isinstance(other, QuantizedKernel) and self.mode == other.mode
                and self.values.shape == other.values.shape
                and self.values.tobytes() == other.values.tobytes()
                and self.scales.tobytes() == other.scales.tobytes()
                and self.labels == other.labels and self.logit_bias == other.logit_bias
                and self.logit_scale == other.logit_scale)


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_kernel(pack: VocabularyPack, mode: str = "int8") -> QuantizedKernel:
    limit = LIMITS[mode]
    k = pack.kernel.astype(np.float64)
    row_max = np.abs(k).max(axis=1) if k.size else np.zeros(k.shape[0])
    scales = np.where(row_max > 0, row_max / limit, 1.0).astype(np.float32)
    s = scales.astype(np.float64)[:, None]
    q = np.clip(round_half_away(k / s), -limit, limit)
    # Division rounding can land a hair past a .5 tie; pull those back so the
    # half-step error bound holds exactly.
    err = k - q * s
    q += np.where(err > s / 2, 1, 0) - np.where(err < -s / 2, 1, 0)
    q = np.clip(q, -limit, limit)
    return QuantizedKernel(mode, q.astype(DTYPES[mode]), scales, pack.logit_bias, pack.labels,
                           pack.logit_scale)


def dequantize(q: QuantizedKernel) -> np.ndarray:
    return q.values.astype(np.float64) * q.scales.astype(np.float64)[:, None]


def classify_quantized(q: QuantizedKernel, features, activation="logit") -> ScoreMap:
    x = _feature_array(features)
    if x.shape[1] != q.dim:
        raise ShapeError(f"kernel dim {q.dim} != feature channels {x.shape[1]}")
    acc = normalize_cells(x) @ q.values.astype(np.float64).T
    logits = acc * q.scales.astype(np.float64) + q.logit_bias
    out = ScoreMap(np.moveaxis(logits, -1, 1), "logit")
    return out.probabilities() if activation == "sigmoid" else out


def classify(classifier, features, activation="logit") -> ScoreMap:
    """Dispatch on float packs vs quantized kernels."""
    if isinstance(classifier, QuantizedKernel):
        return classify_quantized(classifier, features, activation)
    return classify_conv(classifier, features, activation)


def _cells(corpus) -> np.ndarray:
    """Accept (N, D) cells or an iterable of B x C x H x W maps; return (N, D, 1, 1)."""
    if isinstance(corpus, np.ndarray) and corpus.ndim == 2:
        return corpus[:, :, None, None]
    parts = []
    for f in corpus:
        x = _feature_array(f)
        parts.append(np.moveaxis(x, 1, -1).reshape(-1, x.shape[1]))
    return np.concatenate(parts)[:, :, None, None]


@dataclass(frozen=True)
class DriftReport:
    mode: str
    max_abs_delta: float
    mean_abs_delta: float
    top1_agreement: float
    per_class: tuple  # (label, max_abs_delta, mean_abs_delta) per class

    def to_csv(self, path: Optional[str] = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scope", "label", "max_abs_delta", "mean_abs_delta", "top1_agreement"])
        w.writerow(["all", "", repr(self.max_abs_delta), repr(self.mean_abs_delta),
                    repr(self.top1_agreement)])
        for i, (label, mx, mean) in enumerate(self.per_class):
            w.writerow([f"class:{i}", label, repr(mx), repr(mean), ""])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def drift_report(pack: VocabularyPack, q: QuantizedKernel, corpus) -> DriftReport:
    """Score deltas and top-1 agreement between the float and quantized paths."""
    cells = _cells(corpus)
    ref = classify_conv(pack, cells).data[:, :, 0, 0]
    got = classify_quantized(q, cells).data[:, :, 0, 0]
    delta = np.abs(got - ref)
    agree = float(np.mean(np.argmax(ref, axis=1) == np.argmax(got, axis=1)))
    per_class = tuple((label, float(delta[:, i].max()), float(delta[:, i].mean()))
                      for i, label in enumerate(pack.labels))
    return DriftReport(q.mode, float(delta.max()), float(delta.mean()), agree, per_class)
