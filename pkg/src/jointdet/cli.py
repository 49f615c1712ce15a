"""``jointdet`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 verification
failure. Errors go to stderr as ``ERROR(<code>): <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import adaptor as mlp
from .adaptor import AdaptorConfig, init_params, load_params, save_params
from .bench import BenchConfig, emit_report, run_bench
from .embedding_io import EmbeddingMatrix, read_embeddings
from .errors import JointDetError, VerificationError
from .head import DEFAULT_LOGIT_BIAS, DEFAULT_LOGIT_SCALE
from .loss import LossConfig
from .pipeline import EVAL_SCORE_THRESH, IOU_THRESH, SCORE_THRESH, detect
from .quant import drift_report, quantize_kernel
from .synth import (GridSpec, SynthSpec, foreground_cells, gen_corpus, read_corpus,
                    read_feature_blob, write_corpus)
from .training import train_adaptor
from .vocab import build_vocab, load_pack, save_pack
from . import verify as checks

USAGE, DATA = 1, 2

VERSION = f"jointdet {__version__} (DSEM v1, DSAD v1, DSPK v1, DSFM v1)"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fail(code: int, message: str) -> int:
    print(f"ERROR({code}): {message}", file=sys.stderr)
    return code


def cmd_build_vocab(args) -> int:
    emb = read_embeddings(args.embeddings)
    params = load_params(args.adaptor)
    pack = build_vocab(emb, params, args.alpha, args.beta)
    save_pack(pack, args.out)
    print(json.dumps({"out": str(args.out), "K": pack.num_classes, "D": pack.dim}))
    return 0


def cmd_detect(args) -> int:
    pack = load_pack(args.pack)
    features, box_logits, image_size = read_feature_blob(args.features)
    if box_logits is None:
        raise UsageError("feature blob carries no box-regression logits")
    thresh = args.score_thresh
    if thresh is None:
        thresh = EVAL_SCORE_THRESH if args.eval else SCORE_THRESH
    dets = detect(pack, features, box_logits, args.image_size or image_size, thresh,
                  args.iou_thresh, args.max_det)
    text = json.dumps([d.to_dict() for d in dets], ensure_ascii=False)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text)
    return 0


def cmd_train_adaptor(args) -> int:
    emb = read_embeddings(args.embeddings)
    _, _, scenes = read_corpus(args.corpus)
    if args.adaptor:
        params = load_params(args.adaptor)
    else:
        params = init_params(AdaptorConfig(args.layers, emb.dims, args.seed))
    res = train_adaptor(params, emb, scenes, LossConfig(), args.steps, args.lr, args.alpha,
                        args.beta, log_path=args.log)
    save_params(res.params, args.out)
    final = res.history[-1] if res.history else {}
    print(json.dumps({"out": str(args.out), "logit_scale": res.logit_scale,
                      "logit_bias": res.logit_bias, "final": final}))
    return 0


def cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.pack:
        pack = load_pack(args.pack)
        dim = pack.dim
    else:
        dim = args.dim
    raw = read_embeddings(args.embeddings) if args.embeddings else \
        EmbeddingMatrix(rng.standard_normal((args.k, dim)).astype(np.float32))
    params = load_params(args.adaptor) if args.adaptor else \
        init_params(AdaptorConfig(mlp.DEFAULT_LAYERS, dim, args.seed))
    if not args.pack:
        pack = build_vocab(raw, params)
    if getattr(pack, "quantization", "none") != "none":
        raise UsageError("bench takes a float pack; use --mode to quantize")
    cfg = BenchConfig(args.path, args.k, args.threads, args.mode, args.image_size,
                      iterations=args.iters, warmup=args.warmup, seed=args.seed)
    result = run_bench(cfg, pack, params, raw)
    print(emit_report([result], args.out))
    return 0


def cmd_quantize(args) -> int:
    pack = load_pack(args.pack)
    if getattr(pack, "quantization", "none") != "none":
        raise UsageError("pack is already quantized")
    q = quantize_kernel(pack, args.mode)
    save_pack(q, args.out)
    if args.report:
        if not args.corpus:
            raise UsageError("--report needs --corpus")
        _, _, scenes = read_corpus(args.corpus)
        cells, _ = foreground_cells(scenes)
        drift_report(pack, q, cells).to_csv(args.report)
    print(json.dumps({"out": str(args.out), "mode": args.mode, "K": q.num_classes}))
    return 0


def cmd_synth_gen(args) -> int:
    spec = SynthSpec(args.classes, args.dim, args.generator, args.noise,
                     GridSpec.for_image(args.image_size), (args.objects_min, args.objects_max),
                     args.seed)
    emb, scenes = gen_corpus(spec, args.scenes)
    manifest = write_corpus(args.out, spec, emb, scenes)
    print(json.dumps({"manifest": str(manifest), "scenes": len(scenes)}))
    return 0


def cmd_verify(args) -> int:
    results = checks.run_all(args.seed, args.trials, args.grad_trials)
    print(checks.format_table(results))
    if not all(r.passed for r in results):
        raise VerificationError("one or more checks failed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jointdet", description="Joint-space open-vocabulary detection head tools.")
    p.add_argument("--version", action="version", version=VERSION)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("build-vocab", help="adapt and re-parameterize embeddings into a pack")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--adaptor", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--alpha", type=float, default=DEFAULT_LOGIT_SCALE)
    s.add_argument("--beta", type=float, default=DEFAULT_LOGIT_BIAS)
    s.set_defaults(func=cmd_build_vocab)

    s = sub.add_parser("detect", help="run a pack over a feature blob")
    s.add_argument("--pack", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--out")
    s.add_argument("--score-thresh", type=float)
    s.add_argument("--iou-thresh", type=float, default=IOU_THRESH)
    s.add_argument("--max-det", type=int, default=300)
    s.add_argument("--image-size", type=int)
    s.add_argument("--eval", action="store_true", help=f"score threshold {EVAL_SCORE_THRESH}")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("train-adaptor", help="train an adaptor on a synthetic corpus")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--adaptor", help="starting checkpoint (default: fresh init)")
    s.add_argument("--layers", type=int, default=mlp.DEFAULT_LAYERS)
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--lr", type=float, default=1e-2)
    s.add_argument("--alpha", type=float, default=DEFAULT_LOGIT_SCALE)
    s.add_argument("--beta", type=float, default=DEFAULT_LOGIT_BIAS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.set_defaults(func=cmd_train_adaptor)

    s = sub.add_parser("bench", help="time the offline or online head path")
    s.add_argument("--pack")
    s.add_argument("--path", choices=("offline", "online"), default="offline")
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--mode", choices=("float", "int8", "int16"), default="float")
    s.add_argument("--iters", type=int, default=30)
    s.add_argument("--warmup", type=int, default=5)
    s.add_argument("--image-size", type=int, default=320)
    s.add_argument("--dim", type=int, default=512)
    s.add_argument("--embeddings")
    s.add_argument("--adaptor")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("quantize", help="INT8/INT16 weight quantization of a pack")
    s.add_argument("--pack", required=True)
    s.add_argument("--mode", choices=("int8", "int16"), required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report", help="drift report CSV (needs --corpus)")
    s.add_argument("--corpus")
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("synth-gen", help="generate a synthetic scene corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--dim", type=int, default=16)
    s.add_argument("--generator", choices=("linear", "nonlinear"), default="linear")
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--scenes", type=int, default=20)
    s.add_argument("--image-size", type=int, default=256)
    s.add_argument("--objects-min", type=int, default=1)
    s.add_argument("--objects-max", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("verify", help="re-parameterization equivalence and gradient checks")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--grad-trials", type=int, default=20)
    s.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        return _fail(USAGE, str(exc))
    except ValueError as exc:
        return _fail(USAGE, str(exc))
    except JointDetError as exc:
        return _fail(exc.exit_code, str(exc))
    except OSError as exc:
        return _fail(DATA, str(exc))


if __name__ == "__main__":
    sys.exit(main())
