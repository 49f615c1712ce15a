"""N-layer MLP that maps raw text embeddings into the joint space.

Every layer is square (D x D). Hidden layers use relu, the last layer is
purely linear, and N=0 is the identity. All rows go through the same weights,
so the map is row-independent.

Arithmetic runs in float64; :class:`EmbeddingMatrix` outputs are cast back to
float32.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .embedding_io import EmbeddingMatrix
from .errors import DataError, FormatError, LengthError, ShapeError

DSAD_MAGIC = b"DSAD"
DSAD_VERSION = 1
DEFAULT_LAYERS = 3
MAX_LAYERS = 8
_HEADER = struct.Struct("<4sIII")


class _CallCounter:
    def __init__(self):
        self._lock = threading.Lock()
        self._local = threading.local()
        self.value = 0

    def bump(self):
        with self._lock:
            self.value += 1
        self._local.count = getattr(self._local, "count", 0) + 1

    def local_count(self) -> int:
        """Calls made from the current thread."""
        return getattr(self._local, "count", 0)


# Read by the benchmark harness to prove the offline path never touches the adaptor.
forward_calls = _CallCounter()


@dataclass(frozen=True)
class AdaptorConfig:
    num_layers: int = DEFAULT_LAYERS
    dim: int = 512
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.num_layers <= MAX_LAYERS:
            raise ValueError(f"num_layers must be in [0, {MAX_LAYERS}], got {self.num_layers}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")


@dataclass(frozen=True)
class AdaptorParams:
    """Ordered ``(W, b)`` pairs; ``dim`` is kept explicitly so N=0 still knows D."""

    layers: tuple
    dim: int

    def __post_init__(self):
        layers = []
        for i, (w, b) in enumerate(self.layers):
            w = np.asarray(w)
            b = np.asarray(b)
            if w.shape != (self.dim, self.dim) or b.shape != (self.dim,):
                raise ShapeError(
                    f"layer {i}: expected W {self.dim}x{self.dim} and b ({self.dim},), "
                    f"got {w.shape} and {b.shape}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise DataError(f"layer {i} has non-finite parameters")
            layers.append((w, b))
        object.__setattr__(self, "layers", tuple(layers))

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def astype(self, dtype) -> "AdaptorParams":
        return AdaptorParams(
            tuple((w.astype(dtype), b.astype(dtype)) for w, b in self.layers), self.dim
        )

    def flat(self) -> np.ndarray:
        """All parameters concatenated (W row-major then b, layer by layer)."""
        if not self.layers:
            return np.zeros(0)
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers])

    def equal(self, other: "AdaptorParams") -> bool:
        """Bitwise equality, dtype included."""
        if self.dim != other.dim or self.num_layers != other.num_layers:
            return False
        return all(
            w1.dtype == w2.dtype and w1.tobytes() == w2.tobytes() and b1.tobytes() == b2.tobytes()
            for (w1, b1), (w2, b2) in zip(self.layers, other.layers)
        )


def init_params(cfg: AdaptorConfig) -> AdaptorParams:
    """Uniform(+-sqrt(6 / 2D)) weights, zero biases, float32."""
    rng = np.random.default_rng(cfg.seed)
    bound = np.sqrt(6.0 / (2 * cfg.dim))
    layers = []
    for _ in range(cfg.num_layers):
        w = rng.uniform(-bound, bound, size=(cfg.dim, cfg.dim)).astype(np.float32)
        layers.append((w, np.zeros(cfg.dim, dtype=np.float32)))
    return AdaptorParams(tuple(layers), cfg.dim)


def _forward_cache(params: AdaptorParams, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.dim:
        raise ShapeError(f"adaptor expects (*, {params.dim}) input, got {x.shape}")
    cache = []
    h = x
    last = params.num_layers - 1
    for i, (w, b) in enumerate(params.layers):
        z = h @ np.asarray(w, dtype=np.float64).T + np.asarray(b, dtype=np.float64)
        cache.append((h, z))
        h = z if i == last else np.maximum(z, 0.0)
    return h, cache


def forward(params: AdaptorParams, e):
    """Project embeddings into the joint space.

    Accepts an :class:`EmbeddingMatrix` (returns one, float32, labels kept)
    or a plain (K, D) array (returns float64).
    """
    forward_calls.bump()
    if isinstance(e, EmbeddingMatrix):
        if e.dims != params.dim:
            raise ShapeError(f"embedding dim {e.dims} != adaptor dim {params.dim}")
        if params.num_layers == 0:
            return e
        out, _ = _forward_cache(params, e.data)
        return EmbeddingMatrix(out.astype(np.float32), e.labels)
    out, _ = _forward_cache(params, e)
    return out


def backward(params: AdaptorParams, e, upstream) -> Tuple[List[tuple], np.ndarray]:
    """Reverse-mode gradients of ``forward``.

    Returns ``([(dW_1, db_1), ...], d_input)`` in float64. relu'(0) is 0.
    """
    _, cache = _forward_cache(params, np.asarray(e))
    g = np.asarray(upstream, dtype=np.float64)
    expected = (np.asarray(e).shape[0], params.dim)
    if g.shape != expected:
        raise ShapeError(f"upstream gradient shape {g.shape} != forward output {expected}")
    grads = [None] * params.num_layers
    last = params.num_layers - 1
    for i in range(last, -1, -1):
        h, z = cache[i]
        if i != last:
            g = g * (z > 0)
        w = np.asarray(params.layers[i][0], dtype=np.float64)
        grads[i] = (g.T @ h, g.sum(axis=0))
        g = g @ w
    return grads, g


def encode_params(params: AdaptorParams) -> bytes:
    parts = [_HEADER.pack(DSAD_MAGIC, DSAD_VERSION, params.num_layers, params.dim)]
    for w, b in params.layers:
        parts.append(np.asarray(w, dtype="<f4").tobytes())
        parts.append(np.asarray(b, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_params(buf: bytes) -> AdaptorParams:
    if len(buf) < _HEADER.size:
        raise LengthError(f"DSAD header needs {_HEADER.size} bytes, got {len(buf)}")
    magic, version, n, d = _HEADER.unpack_from(buf)
    if magic != DSAD_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DSAD_MAGIC!r}")
    if version != DSAD_VERSION:
        raise FormatError(f"unsupported DSAD version {version}")
    if n > MAX_LAYERS or d == 0:
        raise FormatError(f"invalid adaptor header N={n}, D={d}")
    expected = _HEADER.size + 4 * n * (d * d + d)
    if len(buf) != expected:
        raise LengthError(f"DSAD file is {len(buf)} bytes, header implies {expected}")
    off = _HEADER.size
    layers = []
    for _ in range(n):
        w = np.frombuffer(buf, "<f4", d * d, off).reshape(d, d).astype(np.float32)
        off += 4 * d * d
        b = np.frombuffer(buf, "<f4", d, off).astype(np.float32)
        off += 4 * d
        layers.append((w, b))
    return AdaptorParams(tuple(layers), d)


def save_params(params: AdaptorParams, path) -> None:
    Path(path).write_bytes(encode_params(params))


def load_params(path) -> AdaptorParams:
    return decode_params(Path(path).read_bytes())
