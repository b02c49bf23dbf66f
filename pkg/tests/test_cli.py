#!/usr/bin/env python3
"""
Test the laplace-lora command line: train, laplace, evaluate, report and all
"""

import pandas as pd
import pytest

from laplace_lora.cli import build_parser, main
from tests.helpers import TINY_OVERRIDES


def _tiny(out_dir):
    args = []
    for item in TINY_OVERRIDES:
        args += ["--set", item]
    return args + ["--out", str(out_dir)]


@pytest.fixture
def trained(tmp_path):
    assert main(["train", *_tiny(tmp_path)]) == 0
    return tmp_path


class TestParser:
    def test_version(self, capsys):
        assert main(["--version"]) == 0
        assert capsys.readouterr().out.strip() == "laplace-lora 0.1.0"

    def test_no_command_prints_help(self, capsys):
        assert main([]) == 1
        assert "usage" in capsys.readouterr().out

    def test_repeatable_overrides(self):
        args = build_parser().parse_args(["train", "--set", "a.b=1", "--set", "c.d=2"])
        assert args.overrides == ["a.b=1", "c.d=2"]


class TestTrain:
    def test_checkpoints_per_cadence(self, trained, capsys):
        for step in (20, 40):
            assert (trained / "checkpoints" / "seed0" / f"step{step}.ckpt").exists()

    def test_bad_override_is_reported(self, tmp_path, capsys):
        assert main(["train", *_tiny(tmp_path), "--set", "train.lr=0"]) == 1
        assert capsys.readouterr().err.startswith("Error:")

    def test_output_dir_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LAPLACE_LORA_OUTPUT_DIR", str(tmp_path / "env"))
        args = []
        for item in TINY_OVERRIDES:
            args += ["--set", item]
        assert main(["train", *args]) == 0
        assert (tmp_path / "env" / "checkpoints" / "seed0" / "step40.ckpt").exists()


class TestLaplaceAndEvaluate:
    def test_posterior_file(self, trained, capsys):
        ckpt = trained / "checkpoints" / "seed0" / "step40.ckpt"
        assert main(["laplace", *_tiny(trained), "--checkpoint", str(ckpt)]) == 0
        assert (trained / "posteriors" / "LLLA_step40.curv").exists()
        assert "lambda=" in capsys.readouterr().out

    def test_evaluate_map(self, trained, capsys):
        ckpt = trained / "checkpoints" / "seed0" / "step40.ckpt"
        bins = trained / "bins.csv"
        code = main(
            ["evaluate", *_tiny(trained), "--checkpoint", str(ckpt), "--bins-out", str(bins)]
        )
        assert code == 0
        out = capsys.readouterr().out
        metrics = ("acc", "ece", "nll")
        values = dict(
            line.split(": ") for line in out.splitlines() if line.split(":")[0] in metrics
        )
        assert sorted(values) == ["acc", "ece", "nll"]
        assert 0.0 <= float(values["acc"]) <= 1.0
        table = pd.read_csv(bins)
        assert len(table) == 15

    def test_evaluate_posterior_under_shift(self, trained, capsys):
        ckpt = trained / "checkpoints" / "seed0" / "step40.ckpt"
        assert main(["laplace", *_tiny(trained), "--checkpoint", str(ckpt)]) == 0
        curv = trained / "posteriors" / "LLLA_step40.curv"
        code = main(
            [
                "evaluate",
                *_tiny(trained),
                "--checkpoint",
                str(ckpt),
                "--posterior",
                str(curv),
                "--shift",
                "rotate:90",
            ]
        )
        assert code == 0
        assert "nll: " in capsys.readouterr().out

    def test_missing_checkpoint(self, tmp_path, capsys):
        code = main(["evaluate", *_tiny(tmp_path), "--checkpoint", str(tmp_path / "x.ckpt")])
        assert code == 1
        assert "Error:" in capsys.readouterr().err


class TestReport:
    def test_missing_results(self, tmp_path, capsys):
        assert main(["report", "--out", str(tmp_path)]) == 1
        assert "results file not found" in capsys.readouterr().err

    def test_all_then_report(self, tmp_path, capsys):
        assert main(["all", *_tiny(tmp_path)]) == 0
        assert (tmp_path / "results.csv").exists()
        assert (tmp_path / "summary.md").exists()
        first = (tmp_path / "summary.md").read_bytes()
        results = (tmp_path / "results.csv").read_bytes()
        assert main(["report", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "summary.md").read_bytes() == first
        assert (tmp_path / "results.csv").read_bytes() == results
