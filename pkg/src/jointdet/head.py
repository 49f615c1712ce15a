"""Contrastive classification in the joint space.

Two equivalent routes produce per-cell class logits:

* ``score_online`` takes adapted text embeddings and computes
  ``alpha * cos(feature, embedding) + beta`` directly.
* ``reparameterize`` folds the normalized embeddings and ``alpha`` into a
  K x D kernel once; ``classify_conv`` then runs that kernel as a plain 1x1
  convolution over unit-normalized cell features, plus ``beta``.

Zero feature cells score cos = 0, i.e. logit ``beta`` for every class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embedding_io import EmbeddingMatrix
from .errors import ConflictError, DataError, DegenerateRowError, ShapeError

DEFAULT_LOGIT_SCALE = 1.0 / 0.07
DEFAULT_LOGIT_BIAS = -10.0
STRIDES = (8, 16, 32)
_EPS = 1e-12


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


@dataclass(frozen=True)
class FeatureMap:
    data: np.ndarray
    stride: int = 8
    level: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4:
            raise ShapeError(f"feature map must be B x C x H x W, got shape {data.shape}")
        if self.stride not in STRIDES:
            raise ValueError(f"stride must be one of {STRIDES}, got {self.stride}")
        if not np.all(np.isfinite(data)):
            raise DataError("feature map contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ScoreMap:
    data: np.ndarray  # B x K x H x W
    activation: str = "logit"

    def probabilities(self) -> "ScoreMap":
        if self.activation == "sigmoid":
            return self
        return ScoreMap(sigmoid(self.data), "sigmoid")

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class VocabularyPack:
    """Deployable closed-set classifier: labels, K x D kernel, scale and bias.

    ``kernel`` already contains ``logit_scale``; when ``normalized`` is set,
    every row divided by ``logit_scale`` is unit length.
    """

    labels: tuple
    kernel: np.ndarray
    logit_scale: float = DEFAULT_LOGIT_SCALE
    logit_bias: float = DEFAULT_LOGIT_BIAS
    normalized: bool = True
    quantization: str = field(default="none", init=False)

    def __post_init__(self):
        kernel = np.ascontiguousarray(self.kernel, dtype=np.float32)
        labels = tuple(str(s) for s in self.labels)
        if kernel.ndim != 2:
            raise ShapeError(f"kernel must be K x D, got shape {kernel.shape}")
        if kernel.shape[0] != len(labels):
            raise ShapeError(f"{kernel.shape[0]} kernel rows for {len(labels)} labels")
        if len(set(labels)) != len(labels):
            raise ConflictError("duplicate labels in vocabulary")
        if not self.logit_scale > 0:
            raise ValueError(f"logit_scale must be positive, got {self.logit_scale}")
        if not np.all(np.isfinite(kernel)):
            raise DataError("kernel contains non-finite values")
        if self.normalized and len(labels):
            norms = np.linalg.norm(kernel.astype(np.float64), axis=1) / self.logit_scale
            if np.any(np.abs(norms - 1.0) > 1e-5):
                raise DataError("normalized pack has kernel rows that are not unit length")
        kernel.setflags(write=False)
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "logit_scale", float(self.logit_scale))
        object.__setattr__(self, "logit_bias", float(self.logit_bias))

    @property
    def num_classes(self) -> int:
        return self.kernel.shape[0]

    @property
    def dim(self) -> int:
        return self.kernel.shape[1]

    @property
    def conv_weight(self) -> np.ndarray:
        """The kernel viewed as K x D x 1 x 1 convolution weights."""
        return self.kernel[:, :, None, None]

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def equal(self, other) -> bool:
        return (
            isinstance(other, VocabularyPack)
            and self.labels == other.labels
            and self.kernel.shape == other.kernel.shape
            and self.kernel.tobytes() == other.kernel.tobytes()
            and self.logit_scale == other.logit_scale
            and self.logit_bias == other.logit_bias
            and self.normalized == other.normalized
        )


def _feature_array(features) -> np.ndarray:
    if isinstance(features, FeatureMap):
        return features.data
    x = np.asarray(features)
    if x.ndim != 4:
        raise ShapeError(f"features must be B x C x H x W, got shape {x.shape}")
    return x


def normalize_cells(x: np.ndarray) -> np.ndarray:
    """B x C x H x W -> B x H x W x C with unit-length cells (zero cells stay zero)."""
    cells = np.moveaxis(np.asarray(x, dtype=np.float64), 1, -1)
    norms = np.linalg.norm(cells, axis=-1, keepdims=True)
    return np.divide(cells, norms, out=np.zeros_like(cells), where=norms > _EPS)


def unit_rows(e, labels=None) -> np.ndarray:
    rows = np.asarray(e, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1)
    bad = np.flatnonzero(norms <= _EPS)
    if bad.size:
        i = int(bad[0])
        name = labels[i] if labels is not None else f"row {i}"
        raise DegenerateRowError(f"class {name!r} has a zero-norm embedding", index=i, label=name)
    return rows / norms[:, None]


def score_online(adapted, features, alpha=DEFAULT_LOGIT_SCALE, beta=DEFAULT_LOGIT_BIAS,
                 activation="logit") -> ScoreMap:
    e = np.asarray(adapted)
    x = _feature_array(features)
    if e.ndim != 2 or e.shape[1] != x.shape[1]:
        raise ShapeError(f"embedding dim {e.shape[-1]} != feature channels {x.shape[1]}")
    labels = adapted.labels if isinstance(adapted, EmbeddingMatrix) else None
    cos = normalize_cells(x) @ unit_rows(e, labels).T
    out = ScoreMap(np.moveaxis(alpha * cos + beta, -1, 1), "logit")
    return out.probabilities() if activation == "sigmoid" else out


def reparameterize(adapted, alpha=DEFAULT_LOGIT_SCALE, beta=DEFAULT_LOGIT_BIAS,
                   labels=None) -> VocabularyPack:
    if isinstance(adapted, EmbeddingMatrix):
        labels = labels if labels is not None else adapted.label_list()
    e = np.asarray(adapted)
    if e.ndim != 2 or e.shape[0] < 1:
        raise ShapeError(f"need at least one adapted embedding row, got shape {e.shape}")
    if labels is None:
        labels = [f"class_{i}" for i in range(e.shape[0])]
    kernel = (alpha * unit_rows(e, list(labels))).astype(np.float32)
    return VocabularyPack(tuple(labels), kernel, alpha, beta, True)


def classify_conv(pack: VocabularyPack, features, activation="logit") -> ScoreMap:
    x = _feature_array(features)
    if x.shape[1] != pack.dim:
        raise ShapeError(f"pack dim {pack.dim} != feature channels {x.shape[1]}")
    logits = normalize_cells(x) @ pack.kernel.astype(np.float64).T + pack.logit_bias
    out = ScoreMap(np.moveaxis(logits, -1, 1), "logit")
    return out.probabilities() if activation == "sigmoid" else out
