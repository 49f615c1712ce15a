import json
import struct
import zlib

import numpy as np
import pytest

from jointdet.adaptor import AdaptorConfig, forward, init_params
from jointdet.embedding_io import EmbeddingMatrix
from jointdet.errors import ConflictError, CorruptionError, FormatError, LengthError, NotFoundError, ShapeError
from jointdet.head import classify_conv, score_online
from jointdet.quant import quantize_kernel
from jointdet.vocab import (add_class, build_vocab, decode_pack, encode_pack, load_pack,
                            remove_class, save_pack)


def _emb(rng, k, d):
    return EmbeddingMatrix(rng.standard_normal((k, d)).astype(np.float32), [f"c{i}" for i in range(k)])


def test_build_matches_online_scores(rng):
    emb = _emb(rng, 7, 16)
    p = init_params(AdaptorConfig(3, 16, seed=2))
    pack = build_vocab(emb, p)
    x = rng.standard_normal((1, 16, 3, 3)).astype(np.float32)
    np.testing.assert_allclose(classify_conv(pack, x).data, score_online(forward(p, emb), x).data,
                               atol=1e-5)
    assert pack.labels == emb.labels or list(pack.labels) == list(emb.labels)


def test_add_then_remove_restores(rng):
    emb = _emb(rng, 5, 8)
    p = init_params(AdaptorConfig(2, 8))
    pack = build_vocab(emb, p)
    bigger = add_class(pack, "new", rng.standard_normal(8), p)
    assert bigger.num_classes == 6 and bigger.labels[-1] == "new"
    assert bigger.kernel[:5].tobytes() == pack.kernel.tobytes()
    assert remove_class(bigger, "new").equal(pack)


def test_add_row_equals_full_rebuild(rng):
    emb = _emb(rng, 4, 8)
    p = init_params(AdaptorConfig(2, 8, seed=5))
    pack = build_vocab(EmbeddingMatrix(emb.data[:3], emb.labels[:3]), p)
    grown = add_class(pack, emb.labels[3], emb.data[3], p)
    np.testing.assert_allclose(grown.kernel, build_vocab(emb, p).kernel, atol=1e-6)


def test_add_remove_errors(rng):
    p = init_params(AdaptorConfig(1, 4))
    pack = build_vocab(_emb(rng, 2, 4), p)
    with pytest.raises(ConflictError):
        add_class(pack, "c0", np.ones(4), p)
    with pytest.raises(NotFoundError):
        remove_class(pack, "zebra")
    with pytest.raises(ShapeError):
        add_class(pack, "x", np.ones(5), p)


def test_grow_80_to_1203(rng):
    d = 32
    p = init_params(AdaptorConfig(3, d, seed=0))
    raw = _emb(rng, 1203, d)
    pack = build_vocab(EmbeddingMatrix(raw.data[:80], raw.labels[:80]), p)
    for i in range(80, 1203):
        pack = add_class(pack, raw.labels[i], raw.data[i], p)
    assert pack.num_classes == 1203
    np.testing.assert_allclose(pack.kernel, build_vocab(raw, p).kernel, atol=1e-5)


@pytest.mark.parametrize("mode", [None, "int8", "int16"])
def test_pack_roundtrip(tmp_path, rng, mode):
    pack = build_vocab(_emb(rng, 6, 10), init_params(AdaptorConfig(2, 10)))
    obj = pack if mode is None else quantize_kernel(pack, mode)
    save_pack(obj, tmp_path / "v.dspk")
    back = load_pack(tmp_path / "v.dspk")
    assert back.equal(obj)
    assert encode_pack(back) == encode_pack(obj)


def test_header_is_sorted_compact_json(rng):
    pack = build_vocab(_emb(rng, 2, 3), init_params(AdaptorConfig(0, 3)))
    buf = encode_pack(pack)
    assert buf[:4] == b"DSPK"
    (hlen,) = struct.unpack_from("<I", buf, 4)
    text = buf[8:8 + hlen].decode()
    h = json.loads(text)
    assert text == json.dumps(h, sort_keys=True, separators=(",", ":"))
    assert set(h) == {"D", "K", "crc32", "format", "labels", "logit_bias", "logit_scale",
                      "normalized", "quantization", "version"}
    assert h["crc32"] == zlib.crc32(buf[8 + hlen:])


def test_crc_corruption_detected(rng):
    buf = bytearray(encode_pack(build_vocab(_emb(rng, 3, 4), init_params(AdaptorConfig(1, 4)))))
    for pos in (len(buf) - 1, len(buf) - 12):
        bad = bytearray(buf)
        bad[pos] ^= 0x01
        with pytest.raises(CorruptionError):
            decode_pack(bytes(bad))


def test_pack_structural_errors(rng):
    buf = encode_pack(build_vocab(_emb(rng, 3, 4), init_params(AdaptorConfig(1, 4))))
    with pytest.raises(FormatError):
        decode_pack(b"XXXX" + buf[4:])
    with pytest.raises(LengthError):
        decode_pack(buf[:-1])
    with pytest.raises(LengthError):
        decode_pack(buf[:6])
    with pytest.raises(FormatError):
        decode_pack(buf[:8] + b"{" * (len(buf) - 8))


def test_unicode_labels_roundtrip(rng):
    emb = EmbeddingMatrix(rng.standard_normal((2, 3)).astype(np.float32), ["chat noir", "信号機"])
    pack = build_vocab(emb, init_params(AdaptorConfig(1, 3)))
    assert decode_pack(encode_pack(pack)).labels == ("chat noir", "信号機")
