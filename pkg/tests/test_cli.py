"""End-to-end exercises of the command-line surface.

Everything runs on deliberately tiny datasets and nets so the whole
module stays under a few seconds.
"""

import json
import os

import numpy as np
import pytest

from mtlkit.cli import main, train_config_from_dict
from mtlkit.data import load_manifest
from mtlkit.training import TrainConfig

SPEC = {
    "P": 3,
    "Q": 3,
    "N": 24,
    "correlation_strength": 0.9,
    "image_size": [3, 12, 12],
    "seed": 0,
}

TINY_TRAIN = {
    "mode": "mtl",
    "epochs": 1,
    "batch_size": 8,
    "lr": 0.01,
    "seed": 0,
    "val_fraction": 0.25,
    "net": {"width": 4, "blocks": 1},
    "augment": {"jitter_min": 10, "jitter_max": 12, "crop": 8, "eval_scale": 10},
    "n_folds": 3,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One synthesized dataset + one trained run shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(SPEC))
    data_dir = root / "data"
    assert main(["synth", str(spec_path), str(data_dir)]) == 0
    manifest = str(data_dir / "manifest.jsonl")

    config = dict(TINY_TRAIN, manifest=manifest)
    cfg_path = root / "train.json"
    cfg_path.write_text(json.dumps(config))
    run_dir = root / "run"
    assert main(["train", str(cfg_path), "--out-dir", str(run_dir)]) == 0
    return {"root": root, "manifest": manifest, "cfg_path": str(cfg_path),
            "run_dir": str(run_dir), "ckpt": str(run_dir / "final.ckpt")}


class TestSynth:
    def test_outputs_loadable_manifest(self, workspace):
        ds = load_manifest(workspace["manifest"])
        assert len(ds) == SPEC["N"] and ds.P == 3 and ds.Q == 3

    def test_rerun_byte_identical(self, workspace, tmp_path):
        spec_path = workspace["root"] / "spec.json"
        a, b = tmp_path / "a", tmp_path / "b"
        main(["synth", str(spec_path), str(a)])
        main(["synth", str(spec_path), str(b)])
        for root, _, files in os.walk(a):
            for name in files:
                path = os.path.join(root, name)
                twin = os.path.join(str(b), os.path.relpath(path, str(a)))
                assert open(path, "rb").read() == open(twin, "rb").read(), name

    def test_seed_flag_changes_data(self, workspace, tmp_path):
        spec_path = workspace["root"] / "spec.json"
        main(["synth", str(spec_path), str(tmp_path / "d2"), "--seed", "7"])
        a = load_manifest(workspace["manifest"])
        b = load_manifest(str(tmp_path / "d2" / "manifest.jsonl"))
        assert not np.array_equal(a.samples[0].image, b.samples[0].image)


class TestTrain:
    def test_artifacts_written(self, workspace):
        run = workspace["run_dir"]
        for name in ("final.ckpt", "best.ckpt", "log.jsonl", "config.json"):
            assert os.path.exists(os.path.join(run, name)), name
        records = [json.loads(line) for line in open(os.path.join(run, "log.jsonl"))]
        assert len(records) == TINY_TRAIN["epochs"]
        assert "val_loss" in records[0]

    def test_reruns_bit_identical(self, workspace, tmp_path):
        out = tmp_path / "rerun"
        assert main(["train", workspace["cfg_path"], "--out-dir", str(out)]) == 0
        original = open(os.path.join(workspace["run_dir"], "final.ckpt"), "rb").read()
        rerun = open(out / "final.ckpt", "rb").read()
        assert original == rerun
        assert (out / "log.jsonl").read_text() == open(
            os.path.join(workspace["run_dir"], "log.jsonl")).read()

    def test_mode_override(self, workspace, tmp_path, capsys):
        out = tmp_path / "les"
        assert main(["train", workspace["cfg_path"], "--out-dir", str(out),
                     "--mode", "lesion_only"]) == 0
        cfg = json.loads((out / "config.json").read_text())
        assert cfg["mode"] == "lesion_only"


class TestEval:
    def test_report_and_scores(self, workspace, tmp_path):
        report_path = tmp_path / "report.json"
        prefix = str(tmp_path / "scores")
        assert main(["eval", workspace["ckpt"], workspace["manifest"],
                     "--report-out", str(report_path), "--scores-out", prefix]) == 0
        report = json.loads(report_path.read_text())
        assert 0.0 <= report["map_class"] <= 1.0
        assert 0.0 <= report["top1"] <= 1.0
        assert os.path.exists(prefix + "_lesion.csv")
        assert os.path.exists(prefix + "_location.csv")

    def test_ten_crop_flag(self, workspace, tmp_path):
        report_path = tmp_path / "tc.json"
        assert main(["eval", workspace["ckpt"], workspace["manifest"],
                     "--ten-crop", "--report-out", str(report_path)]) == 0
        assert json.loads(report_path.read_text())["ten_crop"] is True

    def test_dimension_mismatch_exits_nonzero(self, workspace, tmp_path, capsys):
        spec = dict(SPEC, P=4, N=6)
        spec_path = tmp_path / "spec4.json"
        spec_path.write_text(json.dumps(spec))
        main(["synth", str(spec_path), str(tmp_path / "d4")])
        capsys.readouterr()
        code = main(["eval", workspace["ckpt"], str(tmp_path / "d4" / "manifest.jsonl")])
        assert code == 1
        assert "DimensionMismatch" in capsys.readouterr().err


class TestEnsemble:
    def test_scores_roundtrip_through_ensemble(self, workspace, tmp_path, capsys):
        prefix = str(tmp_path / "s")
        main(["eval", workspace["ckpt"], workspace["manifest"], "--scores-out", prefix,
              "--report-out", str(tmp_path / "r.json")])
        capsys.readouterr()
        report_path = tmp_path / "ens.json"
        assert main(["ensemble", prefix + "_lesion.csv", prefix + "_lesion.csv",
                     "--labels", workspace["manifest"],
                     "--report-out", str(report_path)]) == 0
        ens = json.loads(report_path.read_text())
        solo = json.loads((tmp_path / "r.json").read_text())
        # max-ensembling a model with itself changes nothing
        assert ens["map_class"] == pytest.approx(solo["map_class"], abs=1e-12)

    def test_location_kind(self, workspace, tmp_path):
        prefix = str(tmp_path / "s")
        main(["eval", workspace["ckpt"], workspace["manifest"], "--scores-out", prefix,
              "--report-out", str(tmp_path / "r.json")])
        report_path = tmp_path / "loc.json"
        assert main(["ensemble", prefix + "_location.csv", prefix + "_location.csv",
                     "--labels", workspace["manifest"], "--kind", "location",
                     "--method", "mean", "--report-out", str(report_path)]) == 0
        assert "top1" in json.loads(report_path.read_text())


def test_cv_command(workspace, tmp_path):
    report_path = tmp_path / "cv.json"
    assert main(["cv", workspace["cfg_path"], "--epochs", "1",
                 "--report-out", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert len(report["folds"]) == TINY_TRAIN["n_folds"]
    assert "map_class" in report["aggregate"]


def test_correlate_command(workspace, tmp_path):
    out = tmp_path / "corr.csv"
    assert main(["correlate", workspace["manifest"], "--out", str(out)]) == 0
    lines = out.read_text().strip().splitlines()
    assert len(lines) == 1 + 3    # header + one row per lesion
    row = [float(x) for x in lines[1].split(",")[1:]]
    assert sum(row) == pytest.approx(1.0)


def test_retrieve_command(workspace, tmp_path):
    report_path = tmp_path / "ret.json"
    assert main(["retrieve", workspace["ckpt"], workspace["manifest"], "--k", "3",
                 "--report-out", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert report["k"] == 3
    assert len(report["queries"]) == SPEC["N"]
    # self-retrieval: each query's nearest neighbor is itself (the query
    # feature is recomputed singly, so allow float-summation noise)
    first = report["queries"][0]
    assert first["neighbors"][0]["id"] == first["query"]
    assert first["neighbors"][0]["distance"] < 1e-9


def test_attention_command(workspace, tmp_path):
    ds = load_manifest(workspace["manifest"])
    sid = ds.samples[0].id
    assert main(["attention", workspace["ckpt"], workspace["manifest"],
                 "--id", sid, "--out-dir", str(tmp_path)]) == 0
    files = os.listdir(tmp_path)
    assert any(f.endswith(".pgm") for f in files)
    assert any(f.endswith(".json") for f in files)


def test_unknown_sample_id_exits_nonzero(workspace, capsys):
    code = main(["attention", workspace["ckpt"], workspace["manifest"], "--id", "nope"])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_train_config_from_dict_ignores_extras():
    cfg = train_config_from_dict({"epochs": 3, "manifest": "x.jsonl", "val_fraction": 0.2})
    assert isinstance(cfg, TrainConfig) and cfg.epochs == 3
