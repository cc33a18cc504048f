"""Command-line contracts: exit codes, idempotency, pipeline wiring."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from dgrlab import cli


def run(argv):
    return cli.main(["--threads", "1"] + argv)


@pytest.fixture(scope="module")
def mini_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("clidata")
    code = run(["synth", "--n-train", "6", "--n-test", "3", "--level", "1",
                "--seed", "4", "--out", str(root), "--src-size", "64", "--crop", "16"])
    assert code == 0
    return root / "manifest.jsonl"


class TestSynth:
    def test_writes_dataset_and_manifest(self, tmp_path):
        code = run(["synth", "--n-train", "2", "--n-test", "1", "--level", "0",
                    "--seed", "1", "--out", str(tmp_path / "d"),
                    "--src-size", "64", "--crop", "16"])
        assert code == 0
        assert (tmp_path / "d" / "manifest.jsonl").exists()
        assert (tmp_path / "d" / "run_manifest.json").exists()

    def test_level0_identity_transforms(self, tmp_path):
        run(["synth", "--n-train", "2", "--n-test", "1", "--level", "0",
             "--seed", "1", "--out", str(tmp_path / "d"),
             "--src-size", "64", "--crop", "16"])
        from dgrlab.synthdata import load_manifest

        for rec in load_manifest(tmp_path / "d" / "manifest.jsonl"):
            assert rec["affine"] == {"rotation_deg": 0.0, "ty": 0.0, "tx": 0.0, "scale": 1.0}

    def test_rerun_identical_manifest(self, tmp_path):
        args = ["synth", "--n-train", "2", "--n-test", "1", "--level", "2",
                "--seed", "3", "--src-size", "64", "--crop", "16"]
        run(args + ["--out", str(tmp_path / "a")])
        run(args + ["--out", str(tmp_path / "b")])
        a = (tmp_path / "a" / "manifest.jsonl").read_bytes()
        b = (tmp_path / "b" / "manifest.jsonl").read_bytes()
        assert a == b

    def test_bad_level_exit_2(self, tmp_path):
        assert run(["synth", "--level", "9", "--out", str(tmp_path)]) == 2


class TestTrainEval:
    def test_pipeline_end_to_end(self, mini_data, tmp_path):
        cfg = tmp_path / "cfg.toml"
        cfg.write_text('mode = "dgr"\nepochs = 1\nbatch = 3\nseed = 2\ncrop = 16\n'
                       'checkpoint_every = 0\n')
        code = run(["train", "--config", str(cfg), "--data", str(mini_data),
                    "--out", str(tmp_path / "run")])
        assert code == 0
        ckpt = tmp_path / "run" / "ckpt_final.dgrckpt"
        assert ckpt.exists()
        assert (tmp_path / "run" / "training_log.csv").exists()

        code = run(["eval", "--ckpt", str(ckpt), "--data", str(mini_data),
                    "--out", str(tmp_path / "ev")])
        assert code == 0
        with open(tmp_path / "ev" / "metrics.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["id", "psnr", "ssim", "mae"]
        assert len(rows) - 1 == 3
        agg = json.loads((tmp_path / "ev" / "aggregates.json").read_text())
        assert np.isfinite(agg["aggregates"]["psnr"]["mean"])
        assert agg["r2_self_px"] is not None  # dgr checkpoint carries r2

    def test_missing_config_key_exit_2(self, mini_data, tmp_path):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("epochs = 1\n")  # no mode
        code = run(["train", "--config", str(cfg), "--data", str(mini_data),
                    "--out", str(tmp_path / "x")])
        assert code == 2

    def test_unreadable_data_exit_3(self, tmp_path):
        cfg = tmp_path / "cfg.toml"
        cfg.write_text('mode = "baseline"\nepochs = 1\n')
        code = run(["train", "--config", str(cfg),
                    "--data", str(tmp_path / "nope" / "manifest.jsonl"),
                    "--out", str(tmp_path / "x")])
        assert code == 3

    def test_bad_checkpoint_exit_2(self, mini_data, tmp_path):
        bad = tmp_path / "bad.dgrckpt"
        bad.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
        code = run(["eval", "--ckpt", str(bad), "--data", str(mini_data),
                    "--out", str(tmp_path / "e")])
        assert code == 2


class TestBench:
    def test_grid_rows_and_idempotency(self, tmp_path):
        args = ["bench", "--modes", "baseline,dgr", "--levels", "1,5",
                "--seed", "6", "--n-train", "6", "--n-test", "3",
                "--epochs", "1", "--batch", "3", "--crop", "16"]
        code = run(args + ["--out", str(tmp_path / "b1")])
        assert code == 0
        with open(tmp_path / "b1" / "bench.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4
        assert {(r["mode"], r["level"]) for r in rows} == {
            ("baseline", "1"), ("baseline", "5"), ("dgr", "1"), ("dgr", "5")}
        # baseline cells have no registration probes
        base_rows = [r for r in rows if r["mode"] == "baseline"]
        assert all(r["r2_self_px"] == "" for r in base_rows)
        # deterministic mode suppresses wall-clock in the csv
        assert all(r["seconds"] == "0.000" for r in rows)

        manifest = json.loads((tmp_path / "b1" / "run_manifest.json").read_text())
        hashes = manifest["test_noise_hashes"]
        assert hashes["1"] == hashes["5"]  # shared test transform noise

        code = run(args + ["--out", str(tmp_path / "b2")])
        assert code == 0
        assert (tmp_path / "b1" / "bench.csv").read_bytes() == \
            (tmp_path / "b2" / "bench.csv").read_bytes()

    def test_levels_range_syntax(self):
        assert cli._parse_levels("1..5") == [1, 2, 3, 4, 5]
        assert cli._parse_levels("1,3,5") == [1, 3, 5]

    def test_unknown_mode_exit_2(self, tmp_path):
        assert run(["bench", "--modes", "wat", "--out", str(tmp_path)]) == 2


class TestTrendChecks:
    def test_check_trends_logic(self):
        rows = [
            {"mode": "baseline", "level": 1, "psnr_mean": 20.0},
            {"mode": "baseline", "level": 5, "psnr_mean": 17.0},
            {"mode": "rnr", "level": 1, "psnr_mean": 21.0},
            {"mode": "rnr", "level": 5, "psnr_mean": 19.5},
            {"mode": "dgr", "level": 1, "psnr_mean": 21.2},
            {"mode": "dgr", "level": 5, "psnr_mean": 20.8},
        ]
        checks = cli.check_trends(rows)
        assert len(checks) == 4
        assert all(ok for _, ok, _ in checks)

    def test_check_trends_detects_failures(self):
        rows = [
            {"mode": "baseline", "level": 1, "psnr_mean": 20.0},
            {"mode": "baseline", "level": 5, "psnr_mean": 19.9},  # no degradation
            {"mode": "dgr", "level": 1, "psnr_mean": 21.0},
            {"mode": "dgr", "level": 5, "psnr_mean": 19.0},       # dgr collapses
        ]
        results = {name[0]: ok for name, ok, _ in [(c[0], c[1], c[2]) for c in cli.check_trends(rows)]}
        assert results["a"] is False
        assert results["b"] is False
