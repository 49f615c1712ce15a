"""Synthetic scenes with a known text-to-feature mapping.

Each class has a unit text embedding ``e``. Foreground cells of an object
carry ``g(e) + N(0, noise^2)`` where ``g`` is the identity (``linear``) or a
fixed seeded rotation followed by relu and re-normalization (``nonlinear``).
Background cells are random unit vectors whose cosine with every class
prototype ``g(e_k)`` stays below 0.3. Box-regression logits are exact
two-bin encodings of the object box on foreground cells and random noise
elsewhere.

Every random draw comes from ``default_rng([seed, stream, ...])`` so scenes are
reproducible one at a time, in any order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Sequence

import numpy as np

from .boxes import REG_MAX, Detection, GridSpec, box_iou, encode_ltrb, make_anchor_centers
from .embedding_io import EmbeddingMatrix, read_embeddings, write_embeddings
from .errors import CapacityError, FormatError, LengthError
from .head import FeatureMap
from .loss import GtInstance, centers_inside

MAX_CLASS_COS = 0.5
BACKGROUND_COS = 0.3
MAX_DRAWS = 100_000
_STREAM_CLASSES, _STREAM_ROTATION, _STREAM_SCENE = 1, 2, 3
_FAR_LOGIT = -50.0


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 8
    dim: int = 16
    generator: str = "linear"
    noise: float = 0.0
    grid: GridSpec = GridSpec.for_image(256)
    objects: tuple = (1, 3)
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.generator not in ("linear", "nonlinear"):
            raise ValueError(f"generator must be linear or nonlinear, got {self.generator!r}")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        lo, hi = self.objects
        if not 1 <= lo <= hi:
            raise ValueError(f"bad objects-per-scene range {self.objects}")
        object.__setattr__(self, "objects", (int(lo), int(hi)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = {"levels": [list(l) for l in self.grid.levels],
                     "image_size": self.grid.image_size}
        d["objects"] = list(self.objects)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        g = d.pop("grid")
        return cls(grid=GridSpec(tuple(tuple(l) for l in g["levels"]), g["image_size"]),
                   objects=tuple(d.pop("objects")), **d)


@dataclass(frozen=True)
class SynthScene:
    index: int
    features: tuple          # FeatureMap per level, B = 1
    box_logits: np.ndarray   # (A, 4 * REG_MAX), anchor order
    gts: tuple               # GtInstance
    fg_anchor: np.ndarray    # anchor index of each class-generated cell
    fg_class: np.ndarray     # oracle class of each of those cells
    image_size: int = 256

    @property
    def grid(self) -> GridSpec:
        return GridSpec(tuple((f.stride, f.shape[2], f.shape[3]) for f in self.features),
                        self.image_size)

    def anchors(self) -> np.ndarray:
        return make_anchor_centers(self.grid)

    def flat_features(self) -> np.ndarray:
        """(A, D) cell features in anchor order."""
        return np.concatenate([f.data[0].reshape(f.channels, -1).T for f in self.features])

    def equal(self, other: "SynthScene") -> bool:
        return (self.index == other.index and self.image_size == other.image_size
                and len(self.features) == len(other.features)
                and all(a.stride == b.stride and a.data.tobytes() == b.data.tobytes()
                        for a, b in zip(self.features, other.features))
                and self.box_logits.tobytes() == other.box_logits.tobytes()
                and self.gts == other.gts
                and np.array_equal(self.fg_anchor, other.fg_anchor)
                and np.array_equal(self.fg_class, other.fg_class))


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def gen_class_embeddings(spec: SynthSpec) -> EmbeddingMatrix:
    """K unit vectors with pairwise |cos| <= 0.5, by sequential rejection."""
    rng = np.random.default_rng([spec.seed, _STREAM_CLASSES])
    rows = np.zeros((spec.num_classes, spec.dim))
    n = 0
    for _ in range(MAX_DRAWS):
        v = _unit(rng.standard_normal(spec.dim))
        if n == 0 or np.max(np.abs(rows[:n] @ v)) <= MAX_CLASS_COS:
            rows[n] = v
            n += 1
            if n == spec.num_classes:
                labels = [f"class_{i}" for i in range(n)]
                return EmbeddingMatrix(rows.astype(np.float32), labels)
    raise CapacityError(
        f"placed only {n} of {spec.num_classes} classes in D={spec.dim} "
        f"after {MAX_DRAWS} draws"
    )


def rotation(spec: SynthSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, _STREAM_ROTATION])
    q, r = np.linalg.qr(rng.standard_normal((spec.dim, spec.dim)))
    return q * np.sign(np.diag(r))


def generator_map(spec: SynthSpec, e) -> np.ndarray:
    """Apply the scene generator's text-to-feature map row-wise."""
    e = np.asarray(e, dtype=np.float64)
    if spec.generator == "linear":
        return e
    h = np.maximum(e @ rotation(spec).T, 0.0)
    n = np.linalg.norm(h, axis=1, keepdims=True)
    return np.divide(h, n, out=np.zeros_like(h), where=n > 0)


def encode_distance_logits(d, reg_max=REG_MAX) -> np.ndarray:
    """Logits whose softmax puts linear two-bin mass on each distance in ``d``."""
    d = np.clip(np.asarray(d, dtype=np.float64), 0, reg_max - 1)
    lo = np.minimum(np.floor(d), reg_max - 2).astype(np.int64)
    w_hi = d - lo
    out = np.full(d.shape + (reg_max,), _FAR_LOGIT)
    with np.errstate(divide="ignore"):
        l_lo = np.maximum(np.log(1.0 - w_hi), _FAR_LOGIT)
        l_hi = np.maximum(np.log(w_hi), _FAR_LOGIT)
    np.put_along_axis(out, lo[..., None], l_lo[..., None], -1)
    np.put_along_axis(out, lo[..., None] + 1, l_hi[..., None], -1)
    return out


def _place_objects(spec: SynthSpec, rng) -> List[tuple]:
    # An object that finds no free spot in 100 tries is dropped, so crowded
    # small images can hold fewer than ``spec.objects[0]`` objects.
    lo, hi = spec.objects
    count = int(rng.integers(lo, hi + 1))
    size = spec.grid.image_size
    placed = []
    for _ in range(count):
        for _attempt in range(100):
            level = int(rng.integers(len(spec.grid.levels)))
            s = spec.grid.levels[level][0]
            w, h = rng.uniform(2.0, 4.0, size=2) * s
            if w > size or h > size:
                continue
            x1 = rng.uniform(0, size - w)
            y1 = rng.uniform(0, size - h)
            box = (x1, y1, x1 + w, y1 + h)
            if not any(_touch(box, p[0]) for p in placed):
                placed.append((box, level, int(rng.integers(spec.num_classes))))
                break
    return placed


def _touch(a, b) -> bool:
    return not (a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1])


def _background(rng, protos, n, dim) -> np.ndarray:
    out = _unit(rng.standard_normal((n, dim)))
    for _ in range(10_000):
        bad = np.flatnonzero(np.max(out @ protos.T, axis=1) >= BACKGROUND_COS)
        if bad.size == 0:
            return out
        out[bad] = _unit(rng.standard_normal((bad.size, dim)))
    raise CapacityError("cannot draw background cells below the class-cosine cap")


def gen_scene(spec: SynthSpec, class_embeddings: EmbeddingMatrix, index: int = 0) -> SynthScene:
    rng = np.random.default_rng([spec.seed, _STREAM_SCENE, index])
    protos = generator_map(spec, class_embeddings.data)
    grid = spec.grid
    anchors = make_anchor_centers(grid)
    num_anchors = anchors.shape[0]
    objects = _place_objects(spec, rng)

    feats = _background(rng, protos, num_anchors, spec.dim)
    box_logits = rng.standard_normal((num_anchors, 4 * REG_MAX))
    slices = grid.level_slices()
    fg_anchor, fg_class, gts = [], [], []
    for box, level, cls in objects:
        sl = slices[level]
        inside = np.flatnonzero(centers_inside(anchors[sl], [box])[0]) + sl.start
        feats[inside] = protos[cls] + spec.noise * rng.standard_normal((inside.size, spec.dim))
        d = encode_ltrb(anchors[inside], np.tile(box, (inside.size, 1)), anchors[inside, 2])
        box_logits[inside] = encode_distance_logits(d).reshape(inside.size, -1)
        fg_anchor.append(inside)
        fg_class.append(np.full(inside.size, cls))
        gts.append(GtInstance(box, cls))

    maps = []
    for lvl, ((s, h, w), sl) in enumerate(zip(grid.levels, slices)):
        data = feats[sl].T.reshape(1, spec.dim, h, w).astype(np.float32)
        maps.append(FeatureMap(data, s, lvl))
    order = np.argsort(np.concatenate(fg_anchor)) if fg_anchor else np.zeros(0, np.int64)
    return SynthScene(
        index,
        tuple(maps),
        box_logits.astype(np.float32),
        tuple(gts),
        np.concatenate(fg_anchor)[order] if fg_anchor else np.zeros(0, np.int64),
        np.concatenate(fg_class)[order] if fg_class else np.zeros(0, np.int64),
        grid.image_size,
    )


def gen_corpus(spec: SynthSpec, count: int, start: int = 0):
    emb = gen_class_embeddings(spec)
    return emb, [gen_scene(spec, emb, i) for i in range(start, start + count)]


def foreground_cells(scenes: Sequence[SynthScene]):
    """Stack the class-generated cells of all scenes: ((M, D) features, (M,) classes)."""
    x = [s.flat_features()[s.fg_anchor] for s in scenes]
    y = [s.fg_class for s in scenes]
    return np.concatenate(x), np.concatenate(y)


def cell_accuracy(cell_scores: Sequence[np.ndarray], scenes: Sequence[SynthScene]) -> float:
    """Fraction of class-generated cells whose top-scoring class is the true one."""
    hit = total = 0
    for scores, scene in zip(cell_scores, scenes):
        pred = np.argmax(np.asarray(scores)[scene.fg_anchor], axis=1)
        hit += int(np.sum(pred == scene.fg_class))
        total += scene.fg_anchor.size
    return hit / total if total else 0.0


def match_detections(dets: Sequence[Detection], gts: Sequence[GtInstance], iou_thresh=0.5):
    """Greedy score-ordered matching; returns a TP flag per detection and matched gt set."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    used = set()
    tp = [False] * len(dets)
    for i in order:
        d = dets[i]
        best, best_iou = None, iou_thresh
        for g, gt in enumerate(gts):
            if g in used or gt.class_index != d.class_index:
                continue
            iou = box_iou([d.box], [gt.box])[0, 0]
            if iou >= best_iou and (best is None or iou > best_iou):
                best, best_iou = g, iou
        if best is not None:
            used.add(best)
            tp[i] = True
    return tp, used


def _ratio(a, b):
    return a / b if b else 0.0


def evaluate(dets: Sequence[Sequence[Detection]], scenes: Sequence[SynthScene],
             cell_scores=None, iou_thresh: float = 0.5) -> dict:
    """Per-class and overall precision/recall at ``iou_thresh``.

    A ratio with an empty denominator is reported as 0.0. ``cell_scores``
    (per-scene (A, K) arrays), when given, adds ``cell_accuracy``.
    """
    if len(dets) != len(scenes):
        raise ValueError(f"{len(dets)} detection lists for {len(scenes)} scenes")
    counts = {}
    for scene_dets, scene in zip(dets, scenes):
        tp, _ = match_detections(scene_dets, scene.gts, iou_thresh)
        for d, hit in zip(scene_dets, tp):
            c = counts.setdefault(d.class_index, [0, 0, 0])
            c[0 if hit else 1] += 1
        for gt in scene.gts:
            counts.setdefault(gt.class_index, [0, 0, 0])[2] += 1
    per_class = {}
    for k in sorted(counts):
        tp, fp, n_gt = counts[k]
        per_class[k] = {"tp": tp, "fp": fp, "fn": n_gt - tp,
                        "precision": _ratio(tp, tp + fp), "recall": _ratio(tp, n_gt)}
    tp = sum(v["tp"] for v in per_class.values())
    fp = sum(v["fp"] for v in per_class.values())
    fn = sum(v["fn"] for v in per_class.values())
    out = {"per_class": per_class, "tp": tp, "fp": fp, "fn": fn,
           "precision": _ratio(tp, tp + fp), "recall": _ratio(tp, tp + fn)}
    if cell_scores is not None:
        out["cell_accuracy"] = cell_accuracy(cell_scores, scenes)
    return out


# --- feature blob (DSFM) -------------------------------------------------------
#
#   0:4   b"DSFM"   4:8 u32 version   8:12 u32 num_levels   12:16 u32 image_size
#   per level: u32 stride, B, C, H, W, R  (R = 4 * REG_MAX or 0)
#              then B*C*H*W f32 features, then B*R*H*W f32 box logits

DSFM_MAGIC = b"DSFM"
DSFM_VERSION = 1
_BLOB_HEADER = struct.Struct("<4sIII")
_LEVEL_HEADER = struct.Struct("<IIIIII")


def encode_feature_blob(features: Sequence[FeatureMap], box_logits=None, image_size=0) -> bytes:
    parts = [_BLOB_HEADER.pack(DSFM_MAGIC, DSFM_VERSION, len(features), int(image_size))]
    start = 0
    for f in features:
        b, c, h, w = f.shape
        reg = None
        if box_logits is not None:
            reg = np.asarray(box_logits, dtype=np.float32)[start:start + h * w]
            reg = reg.T.reshape(1, -1, h, w)
            start += h * w
        r = 0 if reg is None else reg.shape[1]
        parts.append(_LEVEL_HEADER.pack(f.stride, b, c, h, w, r))
        parts.append(f.data.astype("<f4").tobytes())
        if reg is not None:
            parts.append(reg.astype("<f4").tobytes())
    return b"".join(parts)


def decode_feature_blob(buf: bytes):
    """Returns ``(features, box_logits or None, image_size)``."""
    if len(buf) < _BLOB_HEADER.size:
        raise LengthError("feature blob shorter than its header")
    magic, version, levels, image_size = _BLOB_HEADER.unpack_from(buf)
    if magic != DSFM_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DSFM_MAGIC!r}")
    if version != DSFM_VERSION:
        raise FormatError(f"unsupported DSFM version {version}")
    off = _BLOB_HEADER.size
    features, regs = [], []
    for lvl in range(levels):
        if len(buf) < off + _LEVEL_HEADER.size:
            raise LengthError(f"truncated level {lvl} header")
        s, b, c, h, w, r = _LEVEL_HEADER.unpack_from(buf, off)
        off += _LEVEL_HEADER.size
        n = b * c * h * w
        if len(buf) < off + 4 * (n + b * r * h * w):
            raise LengthError(f"truncated level {lvl} payload")
        data = np.frombuffer(buf, "<f4", n, off).reshape(b, c, h, w).astype(np.float32)
        off += 4 * n
        features.append(FeatureMap(data, s, lvl))
        if r:
            reg = np.frombuffer(buf, "<f4", b * r * h * w, off).reshape(b, r, h, w)
            off += 4 * b * r * h * w
            regs.append(reg[0].reshape(r, -1).T.astype(np.float32))
    if off != len(buf):
        raise LengthError(f"{len(buf) - off} trailing bytes in feature blob")
    box_logits = np.concatenate(regs) if regs and len(regs) == levels else None
    return features, box_logits, image_size


def write_feature_blob(path, features, box_logits=None, image_size=0) -> None:
    Path(path).write_bytes(encode_feature_blob(features, box_logits, image_size))


def read_feature_blob(path):
    return decode_feature_blob(Path(path).read_bytes())


# --- corpus directory ---------------------------------------------------------

MANIFEST = "manifest.json"
CLASSES_FILE = "classes.dsem"


def write_corpus(directory, spec: SynthSpec, embeddings: EmbeddingMatrix,
                 scenes: Sequence[SynthScene]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_embeddings(embeddings, directory / CLASSES_FILE)
    entries = []
    for scene in scenes:
        name = f"scene_{scene.index:05d}.dsfm"
        write_feature_blob(directory / name, scene.features, scene.box_logits, scene.image_size)
        entries.append({
            "file": name,
            "index": scene.index,
            "seed": [spec.seed, _STREAM_SCENE, scene.index],
            "gts": [{"box": list(g.box), "class_index": g.class_index} for g in scene.gts],
            "fg_cells": [[int(a), int(c)] for a, c in zip(scene.fg_anchor, scene.fg_class)],
        })
    manifest = {"format": "jointdet-synth", "version": 1, "spec": spec.to_dict(),
                "classes": CLASSES_FILE, "scenes": entries}
    path = directory / MANIFEST
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return path


def read_corpus(directory):
    """Returns ``(spec, class_embeddings, scenes)``."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text(encoding="utf-8"))
        spec = SynthSpec.from_dict(manifest["spec"])
        entries = manifest["scenes"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad corpus manifest in {directory}: {exc}") from exc
    emb = read_embeddings(directory / manifest.get("classes", CLASSES_FILE))
    scenes = []
    for e in entries:
        feats, box_logits, image_size = read_feature_blob(directory / e["file"])
        cells = np.array(e["fg_cells"], dtype=np.int64).reshape(-1, 2)
        scenes.append(SynthScene(
            e["index"], tuple(feats), box_logits,
            tuple(GtInstance(tuple(g["box"]), g["class_index"]) for g in e["gts"]),
            cells[:, 0], cells[:, 1], image_size,
        ))
    return spec, emb, scenes
