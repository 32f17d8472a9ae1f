"""Command-line surface: JSON output, exit codes, seed resolution."""

import json
import os

import pytest
from click.testing import CliRunner

from ghostprobe.cli import main

TINY_CONFIG = {
    "train": {"max_steps": 2, "epochs": 50, "input_size": 32, "seed": 3},
    "model": {
        "base_channels": 4, "depth": 2, "dim": 16, "max_points": 64,
        "sa_levels": [{"n_out": 16, "k": 4, "mlp": [8, 8]},
                      {"n_out": 4, "k": 4, "mlp": [16, 16]}],
    },
}


def invoke(*args, env=None):
    return CliRunner().invoke(main, [str(a) for a in args], env=env)


def out_json(result):
    assert result.exit_code == 0, result.output + str(result.exception)
    return json.loads(result.output)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(TINY_CONFIG))
    data = root / "ds"
    doc = out_json(invoke("synth", "--out", data, "--count", 5, "--seed", 78))
    assert doc["count"] == 5
    return dict(root=root, cfg=str(cfg_path), data=str(data), ids=doc["sample_ids"])


@pytest.fixture(scope="module")
def trained(workdir):
    out = workdir["root"] / "run"
    doc = out_json(invoke("train", "--data", workdir["data"], "--out", out,
                          "--config", workdir["cfg"]))
    return doc


class TestSynth:
    def test_stdout_is_one_json_document(self, workdir):
        result = invoke("synth", "--out", workdir["root"] / "ds2", "--count", 2,
                        "--seed", 5)
        doc = json.loads(result.output)  # raises if anything extra got printed
        assert set(doc) >= {"dataset", "count", "seed", "config_hash", "sample_ids"}

    def test_same_seed_same_ids(self, workdir, tmp_path):
        a = out_json(invoke("synth", "--out", tmp_path / "a", "--count", 3, "--seed", 9))
        b = out_json(invoke("synth", "--out", tmp_path / "b", "--count", 3, "--seed", 9))
        assert a["sample_ids"] == b["sample_ids"]

    def test_refuses_overwrite_without_force(self, workdir):
        result = invoke("synth", "--out", workdir["data"], "--count", 1, "--seed", 1)
        assert result.exit_code == 2
        ok = invoke("synth", "--out", workdir["data"], "--count", 5, "--seed", 78,
                    "--force")
        assert ok.exit_code == 0

    def test_env_seed_used_when_no_flag(self, tmp_path):
        env = out_json(invoke("synth", "--out", tmp_path / "a", "--count", 2,
                              env={"GHOSTPROBE_SEED": "9"}))
        flag = out_json(invoke("synth", "--out", tmp_path / "b", "--count", 2,
                               "--seed", 9))
        assert env["seed"] == 9
        assert env["sample_ids"] == flag["sample_ids"]

    def test_flag_beats_env(self, tmp_path):
        doc = out_json(invoke("synth", "--out", tmp_path / "a", "--count", 1,
                              "--seed", 4, env={"GHOSTPROBE_SEED": "9"}))
        assert doc["seed"] == 4

    def test_bad_env_seed_is_usage_error(self, tmp_path):
        result = invoke("synth", "--out", tmp_path / "a", "--count", 1,
                        env={"GHOSTPROBE_SEED": "fast"})
        assert result.exit_code == 2


class TestTrain:
    def test_outputs(self, workdir, trained):
        assert trained["steps"] == 2
        assert trained["dataset"] == workdir["data"]
        assert os.path.exists(trained["checkpoint"])
        assert os.path.exists(trained["loss_curve"])
        with open(trained["loss_figure"], "rb") as fh:
            assert fh.read(4) == b"\x89PNG"
        assert sorted(trained["train_ids"] + trained["val_ids"]) \
            == sorted(workdir["ids"])
        assert trained["val_ids"]  # seed 78 dataset splits 4/1

    def test_missing_dataset_is_usage_error(self, tmp_path):
        result = invoke("train", "--data", tmp_path / "nope", "--out", tmp_path / "o")
        assert result.exit_code == 2


class TestEval:
    def test_metrics_schema(self, workdir, trained):
        doc = out_json(invoke("eval", "--data", workdir["data"],
                              "--checkpoint", trained["checkpoint"],
                              "--config", workdir["cfg"]))
        assert set(doc) >= {"dataset", "config_hash", "tp", "fp", "fn",
                            "recall", "precision", "f1", "per_sample"}
        assert doc["config_hash"] == trained["config_hash"]
        assert len(doc["per_sample"]) == len(trained["val_ids"])
        for row in doc["per_sample"]:
            assert set(row) >= {"sample_id", "tp", "fp", "fn", "f1"}

    def test_split_selects_samples(self, workdir, trained):
        doc = out_json(invoke("eval", "--data", workdir["data"],
                              "--checkpoint", trained["checkpoint"],
                              "--config", workdir["cfg"], "--split", "all"))
        assert len(doc["per_sample"]) == 5

    def test_report_directory(self, workdir, trained, tmp_path):
        report = tmp_path / "report"
        doc = out_json(invoke("eval", "--data", workdir["data"],
                              "--checkpoint", trained["checkpoint"],
                              "--config", workdir["cfg"], "--report", report))
        with open(report / "metrics.json") as fh:
            assert json.load(fh) == doc
        overlays = os.listdir(report / "overlays")
        assert sorted(overlays) == sorted(f"{r['sample_id']}.ppm"
                                          for r in doc["per_sample"])
        assert (report / "per_sample_f1.png").exists()
        again = invoke("eval", "--data", workdir["data"],
                       "--checkpoint", trained["checkpoint"],
                       "--config", workdir["cfg"], "--report", report)
        assert again.exit_code == 2  # refuses to clobber without --force

    def test_checkpoint_config_mismatch_is_usage_error(self, workdir, trained):
        # default config describes the full-size model, not the tiny checkpoint
        result = invoke("eval", "--data", workdir["data"],
                        "--checkpoint", trained["checkpoint"])
        assert result.exit_code == 2

    def test_empty_split_is_usage_error(self, workdir, trained, tmp_path):
        out_json(invoke("synth", "--out", tmp_path / "noval", "--count", 5,
                        "--seed", 77))  # hash split leaves no validation ids
        result = invoke("eval", "--data", tmp_path / "noval",
                        "--checkpoint", trained["checkpoint"],
                        "--config", workdir["cfg"])
        assert result.exit_code == 2


class TestPredict:
    def test_overlay_and_sidecar(self, workdir, trained, tmp_path):
        sample_dir = os.path.join(workdir["data"], workdir["ids"][0])
        overlay = tmp_path / "out.ppm"
        doc = out_json(invoke("predict", "--input", sample_dir,
                              "--checkpoint", trained["checkpoint"],
                              "--config", workdir["cfg"], "--overlay", overlay))
        assert doc["sample_id"] == workdir["ids"][0]
        assert isinstance(doc["detections"], list)
        with open(overlay, "rb") as fh:
            assert fh.read(2) == b"P6"
        with open(str(overlay) + ".json") as fh:
            assert json.load(fh) == doc


class TestGradcheck:
    def test_reports_pass(self):
        doc = out_json(invoke("gradcheck", "--seed", 0))
        assert doc["pass"] is True
        assert all(row["pass"] for row in doc["rows"])
        assert any(row["op"] == "composed_model" for row in doc["rows"])


class TestAblate:
    def test_four_modes_and_chart(self, workdir, tmp_path):
        out = tmp_path / "abl"
        doc = out_json(invoke("ablate", "--data", workdir["data"], "--out", out,
                              "--config", workdir["cfg"]))
        assert [r["mode"] for r in doc["rows"]] \
            == ["pcd_only", "rgb_ig", "rgb_pcd", "full"]
        for row in doc["rows"]:
            assert {"flags", "tp", "fp", "fn", "f1"} <= set(row)
        with open(doc["chart"], "rb") as fh:
            assert fh.read(4) == b"\x89PNG"
