#!/usr/bin/env python3
"""NMAE, coverage, core detection and the CSV tables built on them."""

import os
import sys

import numpy as np
import pandas as pd

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from db.models import PerfusionMaps, RoiLabel
from services.metrics import (
    NMAE_COLUMNS,
    cohort_detection,
    coverage,
    coverage_rows,
    detect_core,
    detection_row,
    detection_table,
    nmae,
    nmae_table,
    per_voxel_coverage,
)
from services.phantom import PhantomSpec, generate
from testkit import expect_error, run_tests


def test_nmae_examples():
    roi = np.ones(3, dtype=bool)
    assert abs(nmae([1, 2, 3], [2, 2, 2], roi) - 1 / 3) < 1e-12
    assert nmae([2, 2, 2], [2, 2, 2], roi) == 0.0
    gt = np.array([1.0, 2.0, 4.0])
    assert abs(nmae(gt * 1.1, gt, roi) - 0.1) < 1e-12


def test_nmae_scales_with_error():
    gt = np.array([1.0, 3.0, 5.0])
    e = np.array([0.1, -0.2, 0.3])
    roi = np.ones(3, dtype=bool)
    assert abs(nmae(gt + 2 * e, gt, roi) - 2 * nmae(gt + e, gt, roi)) < 1e-12


def test_nmae_errors():
    expect_error("degenerate-roi", nmae, [1.0], [0.0], np.array([True]))
    expect_error("empty-roi", nmae, [1.0], [1.0], np.array([False]))


def test_coverage_examples():
    assert abs(coverage([0.0, 0.0, 3.0], [1.0, 1.0, 1.0], 1.0) - 2 / 3) < 1e-12
    assert coverage(np.zeros(10), np.ones(10), 0.5) == 1.0
    expect_error("no-samples", coverage, [], [], 1.0)


def test_coverage_matches_gaussian_mass():
    rng = np.random.default_rng(0)
    r = rng.standard_normal(100000) * 2.0
    value = coverage(r, np.full(r.size, 2.0), 1.0)
    assert 0.675 <= value <= 0.687


def test_coverage_monotone_in_k():
    rng = np.random.default_rng(1)
    r = rng.standard_normal(1000)
    sigmas = rng.uniform(0.5, 1.5, 1000)
    values = [coverage(r, sigmas, k) for k in (0.5, 1.0, 1.5, 2.0, 3.0)]
    assert values == sorted(values)


def test_per_voxel_coverage_uses_time_rms():
    residuals = np.array([[1.0, -1.0, 1.0, -1.0], [3.0, 3.0, -3.0, 3.0]])
    assert per_voxel_coverage(residuals, [1.0, 1.0], 1.0) == 0.5
    assert per_voxel_coverage(residuals, [1.0, 1.0], 3.0) == 1.0


def test_detect_core_examples():
    core = np.zeros((4, 4), dtype=bool)
    core[:2] = True
    hit = detect_core(np.where(core, 10.0, 60.0), core)
    assert hit.sensitivity == 1.0 and hit.detected and hit.tp == 8 and hit.fn == 0
    miss = detect_core(np.full((4, 4), 60.0), core)
    assert miss.sensitivity == 0.0 and not miss.detected
    assert detect_core(np.full((4, 4), 10.0), core, threshold=0.0).sensitivity == 0.0


def test_detect_core_excludes_empty_truth_and_counts_false_positives():
    empty = detect_core(np.full((2, 2), 10.0), np.zeros((2, 2), dtype=bool))
    assert empty.excluded and not empty.detected
    reference = np.array([[True, True], [False, False]])
    result = detect_core(np.full((2, 2), 10.0), np.array([[False, False], [True, True]]), reference_mask=reference)
    assert result.false_positives == 2


def test_detect_core_respects_brain_mask():
    core = np.array([True, True, False])
    brain = np.array([True, False, True])
    result = detect_core(np.array([10.0, 10.0, 10.0]), core, brain_mask=brain)
    assert result.tp == 1 and result.fn == 1


def test_tables_on_ground_truth_are_zero():
    case, truth = generate(PhantomSpec(dims=(8, 8, 1), psnr=None))
    table = nmae_table(truth.maps, truth, case.case_id, "oracle")
    assert list(table.columns) == NMAE_COLUMNS
    assert len(table) == 5 * 6
    assert (table["nmae"] == 0.0).all()
    row = detection_row(truth.maps, truth, case.case_id, "oracle")
    assert row["sensitivity"] == 1.0 and row["false_positives"] == 0


def test_cohort_detection_counts():
    rows = [
        {"case": "a", "method": "svd", "sensitivity": 1.0, "detected": True, "tp": 4, "fn": 0, "false_positives": 0, "excluded": False},
        {"case": "b", "method": "svd", "sensitivity": 0.0, "detected": False, "tp": 0, "fn": 4, "false_positives": 1, "excluded": False},
        {"case": "c", "method": "svd", "sensitivity": 0.0, "detected": False, "tp": 0, "fn": 0, "false_positives": 0, "excluded": True},
    ]
    summary = cohort_detection(detection_table(rows))
    assert summary.loc[0, "detected"] == 1 and summary.loc[0, "total"] == 2


def test_coverage_rows_modes():
    rows = coverage_rows("c", "eppinn", [0.0, 2.0], [1.0, 1.0], voxel_residuals=[[0.5, 0.5]], voxel_sigmas=[1.0])
    table = pd.DataFrame(rows)
    assert set(table["mode"]) == {"sample", "voxel"}
    assert table[(table["mode"] == "sample") & (table["k"] == 1.0)]["coverage"].item() == 0.5
    assert table[(table["mode"] == "sample") & (table["k"] == 2.0)]["coverage"].item() == 1.0


if __name__ == "__main__":
    run_tests(dict(globals()))
