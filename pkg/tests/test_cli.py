import csv
import io
import json
import os
import warnings

import numpy as np
import pytest

from idpr.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from test_pipeline import tiny_config
from idpr.pipeline import Pipeline


def read_jsonl(path):
    return [json.loads(line) for line in open(path) if line.strip()]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    Pipeline(tiny_config(root)).run()
    return root


# -- synth -------------------------------------------------------------------

def test_synth_writes_dataset(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"synth": {"num_train": 5, "num_test": 3, "num_negatives": 2}}))
    out = tmp_path / "data"
    assert main(["synth", "--config", str(cfg), "--out", str(out), "--seed", "3"]) == EXIT_OK
    assert len(read_jsonl(out / "train.jsonl")) == 5
    assert len(read_jsonl(out / "test.jsonl")) == 3
    assert len(read_jsonl(out / "negatives.jsonl")) == 2
    rec = read_jsonl(out / "train.jsonl")[0]
    assert (out / rec["image_path"]).exists()
    assert "wrote 5 train" in capsys.readouterr().out


def test_synth_is_deterministic(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"synth": {"num_train": 3, "num_test": 2, "num_negatives": 1}}))
    for name in ("a", "b"):
        assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / name)]) == EXIT_OK
    for f in ("train.jsonl", "test.jsonl", "negatives.jsonl"):
        assert (tmp_path / "a" / f).read_text() == (tmp_path / "b" / f).read_text()
    rec = read_jsonl(tmp_path / "a" / "train.jsonl")[0]
    assert (tmp_path / "a" / rec["image_path"]).read_bytes() == \
        (tmp_path / "b" / rec["image_path"]).read_bytes()


@pytest.mark.skipif(os.geteuid() == 0, reason="permissions are not enforced for root")
def test_synth_unwritable_directory(tmp_path):
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(0o500)
    try:
        code = main(["synth", "--out", str(locked / "data")])
    finally:
        locked.chmod(0o700)
    assert code != EXIT_OK
    assert not (locked / "data" / "train.jsonl").exists()


def test_synth_output_path_is_a_file(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--out", str(blocker / "data")]) == EXIT_DATA
    assert not (blocker / "data" / "train.jsonl").exists()


def test_config_error_exit_code(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"ssvm": {"bogus": 1}}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_config_file_exit_code(tmp_path):
    assert main(["pipeline", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG


# -- stage commands ------------------------------------------------------------

def test_stage_command_runs_until_its_stage(tmp_path, capsys):
    cfg = tiny_config(tmp_path / "run")
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert main(["cluster-types", "--config", str(path)]) == EXIT_OK
    lines = capsys.readouterr().out.split("\n")
    assert [ln.split()[0] for ln in lines if ln] == ["data", "augment", "types"]
    assert (tmp_path / "run" / "types" / "relations.json").exists()
    assert main(["cluster-types", "--config", str(path)]) == EXIT_OK
    assert "skipped" in capsys.readouterr().out


# -- infer ---------------------------------------------------------------------

def infer_args(root, *extra):
    return ["infer", "--model", str(root / "models" / "full.json"),
            "--classifier", str(root / "evidence" / "classifier.npz"), *extra]


def test_infer_single_image(trained, tmp_path):
    rec = read_jsonl(trained / "data" / "test.jsonl")[0]
    image = trained / "data" / rec["image_path"]
    out = tmp_path / "pred.jsonl"
    assert main(infer_args(trained, "--image", str(image), "--out", str(out))) == EXIT_OK
    (pred,) = read_jsonl(out)
    assert pred["id"] == image.stem
    assert np.asarray(pred["joints"]).shape == (4, 2)
    assert np.isfinite(pred["score"])
    assert set(pred["types"]) == {"0-1", "1-0", "1-2", "2-1", "1-3", "3-1"}


def test_infer_torso_box_constrains_root(trained, tmp_path):
    rec = read_jsonl(trained / "data" / "test.jsonl")[0]
    image = trained / "data" / rec["image_path"]
    out = tmp_path / "pred.jsonl"
    box = (2, 3, 5, 6)
    code = main(infer_args(trained, "--image", str(image), "--out", str(out),
                           "--torso-box", ",".join(map(str, box))))
    assert code == EXIT_OK
    root = json.loads((trained / "augment" / "graph.json").read_text())["root"]
    x, y = read_jsonl(out)[0]["joints"][root]
    assert box[0] <= x <= box[2] and box[1] <= y <= box[3]


def test_infer_batch_keeps_order_and_writes_overlays(trained, tmp_path):
    dataset = trained / "data" / "test.jsonl"
    out = tmp_path / "pred.jsonl"
    overlays = tmp_path / "overlays"
    code = main(infer_args(trained, "--images", str(dataset), "--out", str(out),
                           "--overlay-dir", str(overlays)))
    assert code == EXIT_OK
    ids = [r["id"] for r in read_jsonl(dataset)]
    assert [r["id"] for r in read_jsonl(out)] == ids
    assert sorted(p.stem for p in overlays.glob("*.png")) == sorted(ids)


def test_infer_bad_arguments(trained, tmp_path):
    image = tmp_path / "x.png"
    assert main(infer_args(trained)) == EXIT_CONFIG
    assert main(infer_args(trained, "--image", str(image), "--torso-box", "1,2,3")) == EXIT_CONFIG
    assert main(infer_args(trained, "--image", str(image))) == EXIT_DATA
    assert main(["infer", "--model", str(tmp_path / "none.json"),
                 "--image", str(image), "--maps-dir", str(tmp_path)]) == EXIT_DATA


# -- eval ----------------------------------------------------------------------

def write_preds(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))


def test_eval_perfect_predictions(trained, tmp_path, capsys):
    gt = trained / "data" / "test.jsonl"
    out = tmp_path / "rep" / "eval"
    assert main(["eval", "--pred", str(gt), "--gt", str(gt), "--out", str(out)]) == EXIT_OK
    report = json.loads(out.with_suffix(".json").read_text())
    assert report["strict-pcp"]["Mean"] == 100.0
    assert report["buffy-pcp"]["Mean"] == 100.0
    assert all(v[-1] == 1.0 for v in report["pdj"].values())
    assert out.with_suffix(".txt").exists()


def test_eval_noisy_predictions(trained, tmp_path, capsys):
    gt = trained / "data" / "test.jsonl"
    rng = np.random.default_rng(0)
    noisy = []
    for rec in read_jsonl(gt):
        joints = np.asarray(rec["joints"]) + rng.normal(scale=2.0, size=(4, 2))
        noisy.append({"id": rec["id"], "joints": joints.tolist()})
    pred = tmp_path / "pred.jsonl"
    write_preds(pred, noisy)
    out = tmp_path / "eval"
    assert main(["eval", "--pred", str(pred), "--gt", str(gt), "--out", str(out)]) == EXIT_OK
    report = json.loads(out.with_suffix(".json").read_text())
    for limb, strict in report["strict-pcp"].items():
        assert report["buffy-pcp"][limb] >= strict
    rows = list(csv.reader(io.StringIO(out.with_suffix(".csv").read_text())))
    assert rows[0][0] == "threshold" and len(rows) == 11
    table = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    assert np.all(np.diff(table, axis=0) >= 0)


def test_eval_id_mismatch(trained, tmp_path):
    gt = trained / "data" / "test.jsonl"
    records = read_jsonl(gt)[:-1]
    pred = tmp_path / "pred.jsonl"
    write_preds(pred, [{"id": r["id"], "joints": r["joints"]} for r in records])
    assert main(["eval", "--pred", str(pred), "--gt", str(gt)]) == EXIT_DATA
    write_preds(pred, [{"id": "x"}])
    assert main(["eval", "--pred", str(pred), "--gt", str(gt)]) == EXIT_DATA
    assert main(["eval", "--pred", str(gt), "--gt", str(gt), "--metrics", "nope"]) == EXIT_CONFIG


# -- bench ---------------------------------------------------------------------

def test_bench_small(tmp_path, capsys):
    out = tmp_path / "bench.json"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        code = main(["bench", "--T", "1,2", "--sides", "8", "--K", "2", "--repeats", "1",
                     "--backend", "numpy", "--out", str(out)])
    assert code == EXIT_OK
    result = json.loads(out.read_text())
    assert len(result["rows"]) == 2
    assert "numpy gdt_2d" in capsys.readouterr().out
