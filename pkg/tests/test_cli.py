import json
import re
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from crcnn import cli
from crcnn.data import load_dataset, read_pgm, validate

from test_model import TINY

ERROR_LINE = re.compile(r"^error\[E_[A-Z]+\]: [^\n]+\n$")
TINY_FLAGS = [f"--{k}={json.dumps(list(v) if isinstance(v, tuple) else v)}" for k, v in {**TINY, "image_size": 64}.items()]


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    assert cli.main(["synth", "--out", str(root), "--count", "9", "--test-count", "4", "--seed", "3", "--size", "64"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    argv = ["train", "--data", str(dataset / "train.jsonl"), "--out", str(run), *TINY_FLAGS,
            "--steps=4", "--checkpoint_every=2", "--lr=[0.005, 0.0005, 0.00005]"]
    assert cli.main(argv) == 0
    return run


def test_synth_counts_and_validity(dataset):
    lines = (dataset / "train.jsonl").read_text().splitlines()
    assert len(lines) == 9
    assert len((dataset / "test.jsonl").read_text().splitlines()) == 4
    man = load_dataset(dataset / "train.jsonl")
    assert all(validate(s) == [] for s in man.samples())
    assert sorted(r.cls for r in man.records) == [0, 0, 0, 1, 1, 1, 2, 2, 2]


def test_synth_is_deterministic(dataset, tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path), "--count", "9", "--test-count", "4", "--seed", "3", "--size", "64"]) == 0
    assert tree_bytes(tmp_path) == tree_bytes(dataset)


def test_train_outputs(trained):
    log = (trained / "loss_log.csv").read_text().splitlines()
    assert log[0] == "step,L_RPN-A,L_cls_pred,L_bbox_pred,L_Stage-1,L_Stage-2,L_total,lr"
    assert len(log) == 5
    assert (trained / "model.ckpt").exists() and (trained / "last.ckpt").exists()
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["image_size"] == 64 and cfg["steps"] == 4


def test_train_resume_reproduces_log(dataset, trained, tmp_path):
    base = ["train", "--data", str(dataset / "train.jsonl"), *TINY_FLAGS, "--steps=4", "--checkpoint_every=2",
            "--lr=[0.005, 0.0005, 0.00005]"]
    assert cli.main(base + ["--out", str(tmp_path), "--until", "2"]) == 0
    assert cli.main(base + ["--out", str(tmp_path), "--resume", str(tmp_path / "last.ckpt")]) == 0
    assert (tmp_path / "loss_log.csv").read_bytes() == (trained / "loss_log.csv").read_bytes()
    assert (tmp_path / "model.ckpt").read_bytes() == (trained / "model.ckpt").read_bytes()


def test_eval_report(dataset, trained, tmp_path):
    argv = ["eval", "--data", str(dataset / "test.jsonl"), "--checkpoint", str(trained / "model.ckpt")]
    assert cli.main(argv + ["--out", str(tmp_path / "a.json")]) == 0
    assert cli.main(argv + ["--out", str(tmp_path / "b.json")]) == 0
    a = (tmp_path / "a.json").read_bytes()
    assert a == (tmp_path / "b.json").read_bytes()
    rep = json.loads(a)
    assert list(rep)[:4] == ["f1", "auc", "ap_per_class", "map"]
    assert 0 <= rep["f1"] <= 1 and 0 <= rep["auc"] <= 1


def test_eval_scaffold_is_perfect(dataset, tmp_path):
    assert cli.main(["eval", "--data", str(dataset / "test.jsonl"), "--scaffold", "--out", str(tmp_path / "r.json")]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["f1"] == 1.0 and rep["auc"] == 1.0


def test_infer_outputs(dataset, trained, tmp_path):
    img = dataset / "test" / "00000.ppm"
    argv = ["infer", "--checkpoint", str(trained / "model.ckpt"), "--image", str(img), "--out", str(tmp_path),
            "--score-thresh", "0.0"]
    assert cli.main(argv) == 0
    mask = read_pgm(tmp_path / "00000_mask.pgm")
    assert mask.shape == (64, 64) and set(np.unique(mask)) <= {0, 255}
    dets = json.loads((tmp_path / "00000_detections.json").read_text())
    for d in dets:
        assert d["class_name"] in ("splicing", "copy-move", "removal")
        assert set(d) == {"class_name", "score", "bbox"} and len(d["bbox"]) == 4


def test_infer_empty_detections_give_empty_mask(dataset, trained, tmp_path):
    argv = ["infer", "--checkpoint", str(trained / "model.ckpt"), "--image", str(dataset / "test" / "00001.ppm"),
            "--out", str(tmp_path), "--score-thresh", "1.1"]
    assert cli.main(argv) == 0
    assert json.loads((tmp_path / "00001_detections.json").read_text()) == []
    assert read_pgm(tmp_path / "00001_mask.pgm").max() == 0


def _error(capsys, argv, code):
    rc = cli.main(argv)
    err = capsys.readouterr().err
    assert rc != 0
    assert ERROR_LINE.match(err), err
    assert err.startswith(f"error[{code}]")


def test_error_paths(capsys, dataset, trained, tmp_path):
    _error(capsys, ["eval", "--data", str(tmp_path / "none.jsonl"), "--scaffold"], "E_DATA")
    _error(capsys, ["train", "--data", str(dataset / "train.jsonl"), "--out", str(tmp_path), "--bogus=1"], "E_CONFIG")
    _error(capsys, ["train", "--data", str(dataset / "train.jsonl"), "--out", str(tmp_path), "--lr_drops=[0.8, 0.4]"], "E_CONFIG")
    _error(capsys, ["synth", "--out", str(tmp_path), "--count", "0"], "E_CONFIG")
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes((trained / "model.ckpt").read_bytes()[:1000])
    _error(capsys, ["eval", "--data", str(dataset / "test.jsonl"), "--checkpoint", str(cut)], "E_CHECKPOINT")
    _error(capsys, ["eval", "--data", str(dataset / "test.jsonl"), "--checkpoint", str(trained / "model.ckpt"),
                    *TINY_FLAGS, "--skip_structure=false"], "E_CHECKPOINT")
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    _error(capsys, ["infer", "--checkpoint", str(trained / "model.ckpt"), "--image", str(bad), "--out", str(tmp_path)], "E_IO")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    _error(capsys, ["train", "--data", str(dataset / "train.jsonl"), "--out", str(tmp_path), "--config", str(broken)], "E_CONFIG")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_abort_keeps_last_checkpoint(dataset, tmp_path, capsys):
    argv = ["train", "--data", str(dataset / "train.jsonl"), "--out", str(tmp_path), *TINY_FLAGS,
            "--steps=3", "--checkpoint_every=1", "--lr=[1e8, 1e8, 1e8]", "--clip_norm=1e300"]
    rc = cli.main(argv)
    err = capsys.readouterr().err
    assert rc == cli.EXIT_CODES["E_NONFINITE"]
    assert err.startswith("error[E_NONFINITE]") and "last good checkpoint" in err
    assert (tmp_path / "last.ckpt").exists()


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"steps": 10, "skip_structure": False}))
    run = cli.load_run_config(path, {"steps": 20, "lr": [0.1, 0.01, 0.001]})
    assert run.train.steps == 20 and run.model.skip_structure is False and run.train.lr == (0.1, 0.01, 0.001)
    assert cli.RunConfig.from_flat(run.to_flat()) == run
    assert cli.parse_overrides(["--image-size=96", "--phase=stage1"]) == {"image_size": 96, "phase": "stage1"}


def test_entry_point_runs(tmp_path):
    out = subprocess.run([sys.executable, "-m", "crcnn.cli", "synth", "--out", str(tmp_path), "--count", "3",
                          "--test-count", "0", "--size", "48"], capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert len((tmp_path / "train.jsonl").read_text().splitlines()) == 3
    bad = subprocess.run([sys.executable, "-m", "crcnn.cli", "eval", "--data", str(tmp_path / "x.jsonl"), "--scaffold"],
                         capture_output=True, text=True)
    assert bad.returncode != 0 and ERROR_LINE.match(bad.stderr)
