"""Text-embedding matrices and the DSEM binary container.

DSEM layout (all little-endian)::

    0:4    b"DSEM"
    4:8    u32 version (1)
    8:12   u32 K (rows)
    12:16  u32 D (dims)
    16     u8  dtype code (0 = f32)
    17:20  reserved, zero
    20:    K*D f32, row-major

Labels, if any, live next to the binary in ``<name>.labels.json`` as a single
JSON array of K strings.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DataError,
    DegenerateRowError,
    EmptyMatrixError,
    FormatError,
    LengthError,
    ShapeError,
)

DSEM_MAGIC = b"DSEM"
DSEM_VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sIIIB3s")


@dataclass(frozen=True)
class EmbeddingMatrix:
    """K x D float32 matrix with optional per-row labels."""

    data: np.ndarray
    labels: Optional[tuple] = field(default=None)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise ShapeError(f"embedding matrix must be 2-D, got shape {data.shape}")
        if data.shape[0] == 0 or data.shape[1] == 0:
            raise EmptyMatrixError(f"empty embedding matrix {data.shape}")
        if not np.all(np.isfinite(data)):
            bad = int(np.argwhere(~np.isfinite(data))[0][0])
            raise DataError(f"non-finite value in embedding row {bad}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        if self.labels is not None:
            labels = tuple(str(s) for s in self.labels)
            if len(labels) != data.shape[0]:
                raise ShapeError(f"{len(labels)} labels for {data.shape[0]} rows")
            object.__setattr__(self, "labels", labels)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> int:
        return self.data.shape[1]

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    def __len__(self):
        return self.rows

    def label_list(self) -> list:
        if self.labels is not None:
            return list(self.labels)
        return [f"class_{i}" for i in range(self.rows)]


def labels_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".labels.json")


def encode_embeddings(m: EmbeddingMatrix) -> bytes:
    k, d = m.data.shape
    header = _HEADER.pack(DSEM_MAGIC, DSEM_VERSION, k, d, DTYPE_F32, b"\0\0\0")
    return header + m.data.astype("<f4").tobytes()


def decode_embeddings(buf: bytes, labels: Optional[Sequence[str]] = None) -> EmbeddingMatrix:
    if len(buf) < _HEADER.size:
        raise LengthError(f"DSEM header needs {_HEADER.size} bytes, got {len(buf)}")
    magic, version, k, d, dtype, reserved = _HEADER.unpack_from(buf)
    if magic != DSEM_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DSEM_MAGIC!r}")
    if version != DSEM_VERSION:
        raise FormatError(f"unsupported DSEM version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}")
    if reserved != b"\0\0\0":
        raise FormatError("reserved header bytes are not zero")
    if k == 0 or d == 0:
        raise EmptyMatrixError(f"DSEM file declares K={k}, D={d}")
    payload = buf[_HEADER.size:]
    expected = 4 * k * d
    if len(payload) != expected:
        raise LengthError(
            f"payload is {len(payload)} bytes, K*D={k * d} floats need {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(k, d).astype(np.float32)
    return EmbeddingMatrix(data, labels)


def read_embeddings(path) -> EmbeddingMatrix:
    path = Path(path)
    labels = None
    lp = labels_path(path)
    if lp.exists():
        labels = json.loads(lp.read_text(encoding="utf-8"))
        if not isinstance(labels, list) or not all(isinstance(s, str) for s in labels):
            raise FormatError(f"{lp} must hold a single JSON array of strings")
    return decode_embeddings(path.read_bytes(), labels)


def write_embeddings(m: EmbeddingMatrix, path) -> None:
    path = Path(path)
    path.write_bytes(encode_embeddings(m))
    if m.labels is not None:
        labels_path(path).write_text(
            json.dumps(list(m.labels), ensure_ascii=False), encoding="utf-8"
        )


def l2_normalize_rows(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Scale every row to unit Euclidean norm.

    Rows with norm <= 1e-12 raise :class:`DegenerateRowError`; a zero text
    embedding has no direction.
    """
    x = np.asarray(m.data, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(norms <= 1e-12)
    if bad.size:
        i = int(bad[0])
        raise DegenerateRowError(f"row {i} has zero norm", index=i)
    return EmbeddingMatrix((x / norms[:, None]).astype(np.float32), m.labels)
