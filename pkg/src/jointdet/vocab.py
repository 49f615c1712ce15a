"""Offline vocabulary building, incremental edits and the DSPK pack container.

DSPK layout::

    0:4   b"DSPK"
    4:8   u32 LE header length H
    8:8+H UTF-8 JSON header (sorted keys, compact)
    rest  blob: K*D f32 LE kernel, or for quantized packs K f32 LE scales
          followed by K*D int8 / int16 LE values

The header carries labels, K, D, logit scale/bias, the normalized flag, the
quantization mode ("none", "int8", "int16") and the CRC32 of the blob.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from . import adaptor as mlp
from .adaptor import AdaptorParams
from .embedding_io import EmbeddingMatrix
from .errors import ConflictError, CorruptionError, FormatError, LengthError, NotFoundError, ShapeError
from .head import DEFAULT_LOGIT_BIAS, DEFAULT_LOGIT_SCALE, VocabularyPack, reparameterize, unit_rows
from .quant import DTYPES, QuantizedKernel

DSPK_MAGIC = b"DSPK"
DSPK_VERSION = 1
_PREFIX = struct.Struct("<4sI")


def build_vocab(embeddings: EmbeddingMatrix, adaptor: AdaptorParams,
                alpha=DEFAULT_LOGIT_SCALE, beta=DEFAULT_LOGIT_BIAS) -> VocabularyPack:
    if embeddings.dims != adaptor.dim:
        raise ShapeError(f"embedding dim {embeddings.dims} != adaptor dim {adaptor.dim}")
    adapted = mlp.forward(adaptor, embeddings)
    return reparameterize(adapted, alpha, beta, labels=embeddings.label_list())


def _as_row(raw_embedding, dim) -> np.ndarray:
    row = np.asarray(raw_embedding, dtype=np.float32).reshape(1, -1)
    if row.shape[1] != dim:
        raise ShapeError(f"embedding dim {row.shape[1]} != {dim}")
    return row


def add_class(pack: VocabularyPack, label: str, raw_embedding, adaptor: AdaptorParams) -> VocabularyPack:
    """New pack with one more row; existing rows are copied untouched."""
    if label in pack.labels:
        raise ConflictError(f"label {label!r} already in vocabulary")
    if adaptor.dim != pack.dim:
        raise ShapeError(f"adaptor dim {adaptor.dim} != pack dim {pack.dim}")
    row = mlp.forward(adaptor, EmbeddingMatrix(_as_row(raw_embedding, pack.dim), [label]))
    new_row = (pack.logit_scale * unit_rows(row.data, [label])).astype(np.float32)
    return VocabularyPack(pack.labels + (label,), np.concatenate([pack.kernel, new_row]),
                          pack.logit_scale, pack.logit_bias, pack.normalized)


def remove_class(pack: VocabularyPack, label: str) -> VocabularyPack:
    if label not in pack.labels:
        raise NotFoundError(f"label {label!r} not in vocabulary")
    i = pack.labels.index(label)
    return VocabularyPack(pack.labels[:i] + pack.labels[i + 1:], np.delete(pack.kernel, i, axis=0),
                          pack.logit_scale, pack.logit_bias, pack.normalized)


def _blob(pack) -> bytes:
    if isinstance(pack, QuantizedKernel):
        return pack.scales.astype("<f4").tobytes() + pack.values.astype(
            np.dtype(DTYPES[pack.mode]).newbyteorder("<")).tobytes()
    return pack.kernel.astype("<f4").tobytes()


def encode_pack(pack) -> bytes:
    blob = _blob(pack)
    quantized = isinstance(pack, QuantizedKernel)
    header = {
        "format": "DSPK",
        "version": DSPK_VERSION,
        "labels": list(pack.labels),
        "K": pack.num_classes,
        "D": pack.dim,
        "logit_scale": pack.logit_scale,
        "logit_bias": pack.logit_bias,
        "normalized": True if quantized else pack.normalized,
        "quantization": pack.mode if quantized else "none",
        "crc32": zlib.crc32(blob),
    }
    text = json.dumps(header, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(DSPK_MAGIC, len(text)) + text + blob


def decode_pack(buf: bytes):
    """Decode a DSPK container into a VocabularyPack or QuantizedKernel."""
    if len(buf) < _PREFIX.size:
        raise LengthError("pack shorter than its prefix")
    magic, hlen = _PREFIX.unpack_from(buf)
    if magic != DSPK_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DSPK_MAGIC!r}")
    if len(buf) < _PREFIX.size + hlen:
        raise LengthError("pack header truncated")
    try:
        h = json.loads(buf[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
        k, d, mode = int(h["K"]), int(h["D"]), h["quantization"]
        labels, crc = h["labels"], int(h["crc32"])
        alpha, beta = float(h["logit_scale"]), float(h["logit_bias"])
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad pack header: {exc}") from exc
    if h.get("version") != DSPK_VERSION:
        raise FormatError(f"unsupported DSPK version {h.get('version')}")
    if len(labels) != k:
        raise FormatError(f"header lists {len(labels)} labels for K={k}")
    blob = buf[_PREFIX.size + hlen:]
    if mode == "none":
        expected = 4 * k * d
    elif mode in DTYPES:
        expected = 4 * k + np.dtype(DTYPES[mode]).itemsize * k * d
    else:
        raise FormatError(f"unknown quantization mode {mode!r}")
    if len(blob) != expected:
        raise LengthError(f"pack blob is {len(blob)} bytes, header implies {expected}")
    if zlib.crc32(blob) != crc:
        raise CorruptionError("pack blob CRC32 mismatch")
    if mode == "none":
        kernel = np.frombuffer(blob, "<f4").reshape(k, d).astype(np.float32)
        return VocabularyPack(tuple(labels), kernel, alpha, beta, bool(h["normalized"]))
    scales = np.frombuffer(blob, "<f4", k).astype(np.float32)
    dt = np.dtype(DTYPES[mode]).newbyteorder("<")
    values = np.frombuffer(blob, dt, k * d, 4 * k).reshape(k, d).astype(DTYPES[mode])
    return QuantizedKernel(mode, values, scales, beta, tuple(labels), alpha)


def save_pack(pack, path) -> None:
    Path(path).write_bytes(encode_pack(pack))


def load_pack(path):
    return decode_pack(Path(path).read_bytes())
