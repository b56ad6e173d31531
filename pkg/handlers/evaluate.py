# handlers/evaluate.py
"""Команда eval: сравнивает ResultBundle с ground truth кейса."""

from pathlib import Path

import pandas as pd

from config import conf
from db.case_store import read_case, read_results
from services.errors import PerfusionError
from services.logger import run_logger
from services.metrics import detection_row, detection_table, nmae_table


def evaluate(case_dir, result_dir):
    """Returns (nmae table, detection table, coverage table or None)."""
    case = read_case(case_dir)
    if case.ground_truth is None:
        raise PerfusionError("no-ground-truth", f"{case_dir} has no gt/ directory")
    result = read_results(result_dir)
    nmae = nmae_table(result.maps, case.ground_truth, case.case_id, result.method)
    detection = detection_table([detection_row(result.maps, case.ground_truth, case.case_id, result.method)])
    coverage = None
    if result.coverage is not None:
        coverage = result.coverage.assign(case=case.case_id)
    return nmae, detection, coverage


def _companion(path: Path, suffix: str) -> Path:
    return path.with_name(f"{path.stem}_{suffix}.csv")


def register(subparsers):
    p = subparsers.add_parser("eval", help="compute NMAE, detection and coverage tables")
    p.add_argument("--gt", required=True, help="case directory with gt/")
    p.add_argument("--pred", required=True, help="result directory written by fit")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--force", action="store_true", default=conf.runtime.allow_overwrite)
    p.set_defaults(handler=run, parser=p)


def run(args) -> None:
    out = Path(args.out)
    targets = [out, _companion(out, "detection"), _companion(out, "coverage")]
    existing = [str(p) for p in targets if p.exists()]
    if existing and not args.force:
        raise PerfusionError("output-not-empty", f"{existing} already exist (use --force)")
    nmae, detection, coverage = evaluate(args.gt, args.pred)
    out.parent.mkdir(parents=True, exist_ok=True)
    nmae.to_csv(targets[0], index=False)
    detection.to_csv(targets[1], index=False)
    if coverage is not None:
        coverage.to_csv(targets[2], index=False)
    worst = nmae.groupby("param")["nmae"].mean() if not nmae.empty else pd.Series(dtype=float)
    run_logger.log_info("Eval", f"{len(nmae)} NMAE rows written to {out}", ", ".join(f"{k}={v:.3f}" for k, v in worst.items()))
