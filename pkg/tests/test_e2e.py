#!/usr/bin/env python3
"""
End-to-end runs of the full pipeline: train, fit posteriors, evaluate
every method on every eval set and emit the report
"""

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from laplace_lora.cli import main
from laplace_lora.orchestrator import RESULT_COLUMNS
from tests.helpers import TINY_OVERRIDES

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _run_all(out_dir, *extra):
    args = ["all"]
    for item in [*TINY_OVERRIDES, *extra]:
        args += ["--set", item]
    assert main([*args, "--out", str(out_dir)]) == 0
    return out_dir


class TestTinyPipeline:
    def test_results_are_deterministic(self, tmp_path):
        first = _run_all(tmp_path / "a", "experiment.shifts=rotate:90")
        second = _run_all(tmp_path / "b", "experiment.shifts=rotate:90")
        for name in ("results.csv", "summary.md"):
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_rows_cover_methods_shifts_and_steps(self, tmp_path):
        out = _run_all(tmp_path, "experiment.shifts=translate:3,3")
        rows = pd.read_csv(out / "results.csv", keep_default_na=False)
        assert list(rows.columns) == RESULT_COLUMNS
        assert set(rows["shift"]) == {"none", "translate:3,3"}
        assert sorted(rows["step"].unique().tolist()) == [20, 40]
        methods = {"MAP", "temperature", "mc_dropout", "checkpoint_ensemble", "LLLA"}
        assert set(rows["method"]) == methods
        assert len(rows) == len(methods) * 2 * 2
        assert rows[["acc", "ece"]].apply(lambda c: c.between(0.0, 1.0)).all().all()
        assert (rows["nll"] >= 0.0).all()

    def test_curves_written(self, tmp_path):
        out = _run_all(tmp_path)
        assert sorted(p.name for p in out.glob("curve_*.svg")) == [
            "curve_acc_gaussians_none.svg",
            "curve_ece_gaussians_none.svg",
            "curve_nll_gaussians_none.svg",
        ]


@pytest.mark.slow
def test_smoke_config(tmp_path):
    code = main(["all", "--config", str(CONFIGS / "smoke.ini"), "--out", str(tmp_path)])
    assert code == 0
    rows = pd.read_csv(tmp_path / "results.csv", keep_default_na=False)
    assert len(rows) == 12
    assert rows["seed"].unique().tolist() == [0]


@pytest.fixture(scope="module")
def acceptance_rows(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    code = main(["all", "--config", str(CONFIGS / "acceptance.ini"), "--out", str(out)])
    assert code == 0
    rows = pd.read_csv(out / "results.csv", keep_default_na=False)
    return rows[rows["step"] == 5000]


def _paired(rows, shift, metric):
    frame = rows[rows["shift"] == shift].pivot(index="seed", columns="method", values=metric)
    return frame["LA"], frame["MAP"]


@pytest.mark.slow
class TestAcceptance:
    @pytest.mark.parametrize("metric", ["nll", "ece"])
    def test_la_beats_map_beyond_standard_error(self, acceptance_rows, metric):
        la, mapped = _paired(acceptance_rows, "none", metric)
        assert len(la) == 10
        gap = mapped - la
        assert gap.mean() > gap.std(ddof=1) / np.sqrt(len(gap))

    def test_accuracy_is_preserved(self, acceptance_rows):
        la, mapped = _paired(acceptance_rows, "none", "acc")
        assert abs(la.mean() - mapped.mean()) < 0.02

    def test_la_is_better_calibrated_under_shift(self, acceptance_rows):
        _, clean = _paired(acceptance_rows, "none", "acc")
        _, shifted = _paired(acceptance_rows, "rotate:45", "acc")
        assert clean.mean() - shifted.mean() >= 0.15
        la, mapped = _paired(acceptance_rows, "rotate:45", "ece")
        assert (la < mapped).sum() >= 8
