"""Packs are edited by adding or removing rows; other rows are never recomputed."""
import tempfile
from pathlib import Path

import numpy as np

from jointdet.adaptor import AdaptorConfig, init_params
from jointdet.embedding_io import EmbeddingMatrix
from jointdet.errors import CorruptionError
from jointdet.vocab import add_class, build_vocab, load_pack, remove_class, save_pack

rng = np.random.default_rng(3)
adaptor = init_params(AdaptorConfig(3, 64, seed=1))
coco = EmbeddingMatrix(rng.standard_normal((80, 64)).astype(np.float32),
                       [f"coco_{i}" for i in range(80)])
pack = build_vocab(coco, adaptor)
print("start:", pack.num_classes, "classes")

pack = add_class(pack, "capybara", rng.standard_normal(64), adaptor)
pack = remove_class(pack, "coco_5")
print("after edits:", pack.num_classes, "classes, last =", pack.labels[-1])

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "vocab.dspk"
    save_pack(pack, path)
    raw = path.read_bytes()
    print("file size:", len(raw), "bytes; header starts", raw[8:40])
    assert load_pack(path).equal(pack)

    # flip one bit in the kernel and the CRC catches it
    bad = bytearray(raw)
    bad[-7] ^= 0x10
    path.write_bytes(bytes(bad))
    try:
        load_pack(path)
    except CorruptionError as exc:
        print("corrupted pack rejected:", exc)
