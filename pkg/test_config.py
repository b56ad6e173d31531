#!/usr/bin/env python3
"""Run configuration: defaults, JSON loading, overrides."""

import json
import os
import sys
import tempfile
from pathlib import Path

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from config import ABLATION_FLAGS, DeconvConfig, TrainConfig, conf, load_run_config
from testkit import expect_error, run_tests


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.iterations, cfg.batch_samples, cfg.lambda_edl, cfg.lambda_reg) == (5000, 25000, 0.5, 1e-3)
    assert (cfg.delay_max, cfg.mtt_max, cfg.omega0) == (15.0, 30.0, 15.0)
    assert all(getattr(cfg, flag) is False for flag in ABLATION_FLAGS)
    assert conf.runtime.threads >= 1


def test_json_round_trip_with_deconv_section():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "cfg.json"
        path.write_text(json.dumps({"iterations": 10, "no_annealing": True, "deconv": {"svd_truncation": 0.15}}))
        train, deconv = load_run_config(path)
        assert train.iterations == 10 and train.no_annealing
        assert deconv.svd_truncation == 0.15
        resolved = Path(tmp) / "resolved.json"
        resolved.write_text(json.dumps({**train.to_dict(), "method": "eppinn"}))
        assert load_run_config(resolved)[0] == train


def test_unknown_keys_and_bad_values_rejected():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "cfg.json"
        path.write_text(json.dumps({"iterationz": 10}))
        expect_error("invalid-config", load_run_config, path)
    expect_error("invalid-config", TrainConfig(lambda_res=-1.0).validate)
    expect_error("invalid-config", TrainConfig(iterations=0).validate)
    expect_error("invalid-config", DeconvConfig(svd_truncation=1.5).validate)


def test_overrides_ignore_none():
    cfg = TrainConfig().with_overrides(seed=None, iterations=7, no_cbv_param=True)
    assert cfg.seed == 0 and cfg.iterations == 7 and cfg.no_cbv_param


def test_missing_config_gives_defaults():
    train, deconv = load_run_config(None)
    assert train == TrainConfig() and deconv == DeconvConfig()


if __name__ == "__main__":
    run_tests(dict(globals()))
