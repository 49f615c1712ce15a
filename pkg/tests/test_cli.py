import json
import subprocess
import sys

import numpy as np
import pytest

from jointdet.adaptor import AdaptorConfig, init_params, load_params, save_params
from jointdet.cli import VERSION, main
from jointdet.embedding_io import EmbeddingMatrix, write_embeddings
from jointdet.synth import read_feature_blob


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_version_via_module():
    proc = subprocess.run([sys.executable, "-m", "jointdet", "--version"], capture_output=True,
                          text=True)
    assert proc.returncode == 0
    assert proc.stdout.strip() == VERSION
    assert "DSEM v1" in VERSION and "DSPK v1" in VERSION


def test_usage_errors_exit_1(capsys):
    code, _, err = _run(capsys)
    assert code == 1 and err.startswith("ERROR(1):")
    code, _, err = _run(capsys, "detect", "--pack")
    assert code == 1
    code, _, _ = _run(capsys, "bench", "--k", "10", "--iters", "3")
    assert code == 1


def test_missing_file_exits_2(capsys, tmp_path):
    code, _, err = _run(capsys, "quantize", "--pack", str(tmp_path / "nope.dspk"), "--mode", "int8",
                        "--out", str(tmp_path / "q.dspk"))
    assert code == 2 and "ERROR(2)" in err


@pytest.fixture
def workspace(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    code, _, _ = _run(capsys, "synth-gen", "--out", str(corpus), "--classes", "5", "--dim", "8",
                      "--scenes", "3", "--image-size", "64", "--seed", "1")
    assert code == 0
    save_params(init_params(AdaptorConfig(0, 8)), tmp_path / "id.dsad")
    code, _, _ = _run(capsys, "build-vocab", "--embeddings", str(corpus / "classes.dsem"),
                      "--adaptor", str(tmp_path / "id.dsad"), "--out", str(tmp_path / "v.dspk"))
    assert code == 0
    return tmp_path, corpus


def test_detect_finds_objects(capsys, workspace):
    tmp, corpus = workspace
    code, out, _ = _run(capsys, "detect", "--pack", str(tmp / "v.dspk"), "--features",
                        str(corpus / "scene_00000.dsfm"))
    assert code == 0
    dets = json.loads(out)
    manifest = json.loads((corpus / "manifest.json").read_text())
    assert len(dets) == len(manifest["scenes"][0]["gts"])
    assert set(dets[0]) == {"box", "score", "label", "class_index"}


def test_detect_dim_mismatch_exits_2(capsys, workspace, tmp_path):
    tmp, corpus = workspace
    emb = EmbeddingMatrix(np.eye(3, 6, dtype=np.float32))
    write_embeddings(emb, tmp_path / "six.dsem")
    save_params(init_params(AdaptorConfig(1, 6)), tmp_path / "six.dsad")
    _run(capsys, "build-vocab", "--embeddings", str(tmp_path / "six.dsem"), "--adaptor",
         str(tmp_path / "six.dsad"), "--out", str(tmp_path / "six.dspk"))
    code, _, err = _run(capsys, "detect", "--pack", str(tmp_path / "six.dspk"), "--features",
                        str(corpus / "scene_00000.dsfm"))
    assert code == 2 and "ERROR(2)" in err


def test_train_adaptor_lr_zero_identical(capsys, workspace):
    tmp, corpus = workspace
    start = init_params(AdaptorConfig(2, 8, seed=3))
    save_params(start, tmp / "start.dsad")
    code, out, _ = _run(capsys, "train-adaptor", "--embeddings", str(corpus / "classes.dsem"),
                        "--corpus", str(corpus), "--adaptor", str(tmp / "start.dsad"), "--lr", "0",
                        "--steps", "2", "--out", str(tmp / "end.dsad"), "--log", str(tmp / "log.csv"))
    assert code == 0
    assert (tmp / "end.dsad").read_bytes() == (tmp / "start.dsad").read_bytes()
    assert (tmp / "log.csv").read_text().count("\n") == 3


def test_quantize_with_report(capsys, workspace):
    tmp, corpus = workspace
    code, _, _ = _run(capsys, "quantize", "--pack", str(tmp / "v.dspk"), "--mode", "int8", "--out",
                      str(tmp / "q.dspk"), "--report", str(tmp / "drift.csv"), "--corpus", str(corpus))
    assert code == 0
    assert (tmp / "drift.csv").read_text().startswith("scope,label,")
    code, _, err = _run(capsys, "quantize", "--pack", str(tmp / "q.dspk"), "--mode", "int16",
                        "--out", str(tmp / "qq.dspk"))
    assert code == 1


def test_bench_runs(capsys, tmp_path):
    code, out, _ = _run(capsys, "bench", "--k", "8", "--dim", "16", "--image-size", "64",
                        "--out", str(tmp_path / "b.csv"))
    assert code == 0 and "offline" in out


def test_verify_exits_0(capsys):
    code, out, _ = _run(capsys, "verify", "--trials", "10", "--grad-trials", "2")
    assert code == 0
    assert out.count("PASS") == 2
