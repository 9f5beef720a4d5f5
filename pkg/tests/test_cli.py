import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from dualmode.cli import main

TINY = {
    "encoder": {"n_blocks": 2, "d_model": 32, "d_ff": 64, "n_heads": 2, "dropout": 0.0},
    "optimizer": {"warmup_steps": 2, "batch_size": 4, "total_steps": 3},
    "stage": {"brq": {"n_codes": 32}, "distill": {"k_clusters": 8, "tap": 1},
              "transducer": {"embed_dim": 16, "pred_hidden": 16, "pred_layers": 1, "joint_dim": 32}},
    "data": {"test_fraction": 0.3, "dev_fraction": 0.2},
    "probe": {"steps": 3, "tasks": ["asr_ctc", "classification"]},
}


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def summary(out):
    return json.loads(out.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["synth-data", "--n-utts", "20", "--out", str(root / "runs")]) == 0
    [manifest] = list((root / "runs").glob("synth-data-*/data/manifest.jsonl"))
    return root, cfg, manifest


@pytest.fixture(scope="module")
def recipe(workspace):
    """pretrain -> finetune -> distill -> finetune-dual through the CLI."""
    root, cfg, manifest = workspace
    common = ["--config", str(cfg), "--set", f"data.manifest={manifest}", "--out", str(root / "runs")]
    ckpts, parent = {}, None
    for cmd in ("pretrain", "finetune", "distill", "finetune-dual"):
        argv = [cmd, *common] + (["--init", parent] if parent else [])
        assert main(argv) == 0
        runs = sorted((root / "runs").glob(f"{cmd}-*"))
        parent = str(runs[-1] / "checkpoint")
        ckpts[cmd] = parent
    return common, ckpts


class TestAnalyzeMasks:
    def test_matrix_and_csv(self, capsys, tmp_path):
        code, out, _ = run(capsys, "analyze-masks", "--T", "6", "--lb-frames", "2", "--la-frames", "2",
                           "--out", str(tmp_path))
        assert code == 0
        lines = out.splitlines()
        assert lines[:6] == ["111000", "111000", "111000", "011111", "001111", "000111"]
        rows = list(csv.DictReader(lines[7:]))
        assert len(rows) == 6 * 2
        [d] = list(tmp_path.iterdir())
        np.testing.assert_array_equal(np.load(d / "allow.npy").astype(int),
                                      [[int(c) for c in r] for r in lines[:6]])
        assert json.loads((d / "summary.json").read_text())["no_lookahead_accumulation"] is True

    def test_bad_frames(self, capsys, tmp_path):
        code, _, err = run(capsys, "analyze-masks", "--T", "4", "--lb-frames", "-1", "--out", str(tmp_path))
        assert code == 2 and json.loads(err)["error"] == "usage"


class TestErrors:
    def test_unknown_subcommand(self, capsys):
        code, _, _ = run(capsys, "fly")
        assert code == 2

    def test_module_entry_point(self, tmp_path):
        r = subprocess.run([sys.executable, "-m", "dualmode", "fly"], capture_output=True, text=True)
        assert r.returncode == 2

    def test_config_key_path(self, capsys, tmp_path):
        code, _, err = run(capsys, "prepare", "--set", "optimizer.lrr=1", "--out", str(tmp_path))
        assert code == 2
        e = json.loads(err)
        assert e["error"] == "config" and e["key_path"] == "optimizer.lrr"

    def test_missing_manifest_setting(self, capsys, tmp_path):
        code, _, err = run(capsys, "prepare", "--out", str(tmp_path))
        assert code == 2 and json.loads(err)["key_path"] == "data.manifest"

    def test_missing_config_file(self, capsys, tmp_path):
        code, _, _ = run(capsys, "prepare", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path))
        assert code == 2

    def test_runtime_error_exit_1(self, capsys, workspace):
        root, cfg, manifest = workspace
        code, _, err = run(capsys, "distill", "--config", str(cfg), "--set", f"data.manifest={manifest}",
                           "--out", str(root / "err"))
        assert code == 1 and json.loads(err)["error"] == "PrerequisiteError"


class TestRecipe:
    def test_snapshot(self, workspace, recipe):
        root, _, _ = workspace
        [d] = sorted((root / "runs").glob("finetune-dual-*"))
        snap = json.loads((d / "config.json").read_text())
        assert snap["config"]["stage"]["name"] == "S4" and snap["seed"] == 0
        assert any(o.startswith("stage.init=") for o in snap["overrides"])

    def test_prepare(self, capsys, workspace, tmp_path):
        _, cfg, manifest = workspace
        code, out, _ = run(capsys, "prepare", "--config", str(cfg), "--set", f"data.manifest={manifest}",
                           "--out", str(tmp_path))
        s = summary(out)
        assert code == 0 and sum(s["splits"].values()) == 20

    def test_eval_grid_four_rows(self, capsys, recipe):
        common, ckpts = recipe
        code, out, _ = run(capsys, "eval-grid", *common, "--checkpoint", ckpts["finetune-dual"])
        assert code == 0
        with open(summary(out)["table"]) as f:
            rows = list(csv.DictReader(f))
        assert [r["context"] for r in rows] == ["(inf,inf)", "(5.4,1)", "(5.4,0.6)", "(5.4,0)"]
        assert len({r["checkpoint_id"] for r in rows}) == 1

    def test_extract_and_kmeans(self, capsys, recipe):
        common, ckpts = recipe
        code, out, _ = run(capsys, "extract-embeddings", *common, "--checkpoint", ckpts["finetune"], "--block", "1")
        assert code == 0
        emb = summary(out)["embeddings"]
        code, out, _ = run(capsys, "kmeans", *common, "--embeddings", emb, "--k", "4")
        s = summary(out)
        assert code == 0 and s["inertia"] >= 0
        code, out, _ = run(capsys, "distill", *common, "--init", ckpts["finetune"],
                           "--pseudo-labels", s["pseudo_labels"])
        assert code == 0

    def test_layer_sweep(self, capsys, recipe):
        common, ckpts = recipe
        code, out, _ = run(capsys, "layer-sweep", *common, "--checkpoint", ckpts["finetune-dual"], "--no-plots")
        assert code == 0
        with open(summary(out)["report"]) as f:
            assert len(list(csv.DictReader(f))) == 2 * 2

    def test_probe(self, capsys, recipe):
        common, ckpts = recipe
        code, out, _ = run(capsys, "probe", *common, "--checkpoint", ckpts["finetune-dual"],
                           "--set", "probe.layer=all")
        s = summary(out)
        assert code == 0 and len(s["layer_weights"]) == 3
