#!/usr/bin/env python3
"""Command-line surface: phantom, fit, eval, sweep and exit codes."""

import hashlib
import json
import os
import sys
import tempfile
from pathlib import Path

import pandas as pd

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from db.case_store import read_case, write_case, write_results
from db.models import CaseBundle, ResultBundle
from main import main
from services.phantom import PhantomSpec, generate
from testkit import run_tests

TINY = ["--dims", "8", "8", "1"]
TINY_TRAIN = {
    "iterations": 10,
    "aif_pretrain_iters": 10,
    "batch_samples": 128,
    "trace_every": 5,
    "coverage_samples": 128,
    "coverage_time_points": 4,
    "hash_log2_table": 10,
    "tissue_hidden": 16,
    "param_hidden": 8,
}


def _exit_code(argv) -> int:
    try:
        return main(argv)
    except SystemExit as e:
        return e.code


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_phantom_round_trip_and_determinism():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        args = ["phantom", "--psnr", "18", "--dt", "1", "--seed", "42", *TINY]
        assert main(args + ["--out", str(tmp / "c1")]) == 0
        assert main(args + ["--out", str(tmp / "c2")]) == 0
        assert _sha(tmp / "c1" / "ctp.f32") == _sha(tmp / "c2" / "ctp.f32")
        write_case(read_case(tmp / "c1"), tmp / "c3")
        for name in ("ctp.f32", "aif.f32", "manifest.json", "gt/cbf.f32"):
            assert (tmp / "c1" / name).read_bytes() == (tmp / "c3" / name).read_bytes(), name


def test_phantom_rejects_off_grid_dt_unless_forced():
    with tempfile.TemporaryDirectory() as tmp:
        assert _exit_code(["phantom", "--dt", "5", "--out", tmp, *TINY]) == 2
        assert _exit_code(["phantom", "--psnr", "40", "--out", tmp, *TINY]) == 2
        assert main(["phantom", "--dt", "5", "--force", "--out", tmp, *TINY]) == 0


def test_fit_svd_emits_maps_and_refuses_overwrite():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        assert main(["phantom", "--noiseless", "--out", str(tmp / "case"), *TINY]) == 0
        assert main(["fit", "--method", "svd", str(tmp / "case"), "--out", str(tmp / "r1")]) == 0
        for name in ("cbf", "cbv", "mtt", "delay", "tmax"):
            assert (tmp / "r1" / "maps" / f"{name}.f32").exists()
        assert (tmp / "r1" / "metrics.csv").exists()
        assert main(["fit", "--method", "svd", str(tmp / "case"), "--out", str(tmp / "r1")]) == 1
        assert main(["fit", "--method", "svd", str(tmp / "case"), "--out", str(tmp / "r1"), "--force"]) == 0


def test_unknown_method_is_usage_error():
    with tempfile.TemporaryDirectory() as tmp:
        assert _exit_code(["fit", "--method", "fft", tmp, "--out", tmp]) == 2


def test_fit_eppinn_is_deterministic_and_checkpointed():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        config = tmp / "cfg.json"
        config.write_text(json.dumps(TINY_TRAIN))
        assert main(["phantom", "--noiseless", "--out", str(tmp / "case"), *TINY]) == 0
        for out in ("a", "b"):
            code = main(["fit", "--method", "eppinn", "--config", str(config), "--seed", "3",
                         str(tmp / "case"), "--out", str(tmp / out)])
            assert code == 0
        for name in ("cbf", "cbv", "mtt", "delay", "tmax"):
            assert _sha(tmp / "a" / "maps" / f"{name}.f32") == _sha(tmp / "b" / "maps" / f"{name}.f32"), name
        assert (tmp / "a" / "uncertainty" / "total.f32").exists()
        assert (tmp / "a" / "checkpoint" / "header.json").exists()
        assert (tmp / "a" / "coverage.csv").exists()
        resolved = json.loads((tmp / "a" / "resolved_config.json").read_text())
        assert resolved["seed"] == 3 and resolved["method"] == "eppinn"


def test_fit_with_ablation_switch():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        config = tmp / "cfg.json"
        config.write_text(json.dumps(TINY_TRAIN))
        assert main(["phantom", "--noiseless", "--out", str(tmp / "case"), *TINY]) == 0
        assert main(["fit", "--method", "pinn", "--no-annealing", "--config", str(config),
                     str(tmp / "case"), "--out", str(tmp / "r")]) == 0
        resolved = json.loads((tmp / "r" / "resolved_config.json").read_text())
        assert resolved["no_annealing"] and resolved["no_evidential"]
        assert not (tmp / "r" / "uncertainty").exists()


def test_eval_on_ground_truth_is_zero():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        case, truth = generate(PhantomSpec(dims=(8, 8, 1), psnr=None))
        write_case(case, tmp / "case")
        write_results(ResultBundle(method="oracle", maps=truth.maps), tmp / "pred", case.grid_shape)
        assert main(["eval", "--gt", str(tmp / "case"), "--pred", str(tmp / "pred"), "--out", str(tmp / "metrics.csv")]) == 0
        metrics = pd.read_csv(tmp / "metrics.csv")
        assert len(metrics) == 30 and (metrics["nmae"] == 0.0).all()
        detection = pd.read_csv(tmp / "metrics_detection.csv")
        assert detection.loc[0, "sensitivity"] == 1.0


def test_eval_without_ground_truth_fails():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        case, truth = generate(PhantomSpec(dims=(8, 8, 1), psnr=None))
        bare = CaseBundle(tissue=case.tissue, aif=case.aif, times=case.times, spacing=case.spacing)
        write_case(bare, tmp / "case")
        write_results(ResultBundle(method="oracle", maps=truth.maps), tmp / "pred", case.grid_shape)
        assert main(["eval", "--gt", str(tmp / "case"), "--pred", str(tmp / "pred"), "--out", str(tmp / "m.csv")]) == 1


def test_sweep_counts_cells_and_rows():
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "sweep"
        code = main(["sweep", "--psnr", "18", "27", "--dt", "1", "2", "--methods", "svd", "bcsvd",
                     "--seeds", "0", *TINY, "--out", str(out)])
        assert code == 0
        cells = [p for p in (out / "cells").glob("*/*") if p.is_dir()]
        assert len(cells) == 8
        summary = pd.read_csv(out / "summary.csv")
        assert list(summary.columns) == ["case", "method", "param", "roi", "nmae", "psnr", "dt", "seed"]
        assert len(summary) == 8 * 5 * 6
        assert len(pd.read_csv(out / "detection_summary.csv")) == 8


if __name__ == "__main__":
    run_tests(dict(globals()))
