# handlers/sweep.py
"""
Команда sweep: сетка PSNR x dt x метод x seed.

Кейсы генерируются последовательно, ячейки (кейс, метод) выполняются в пуле
процессов; каждая ячейка пишет в свою директорию, порядок сводки фиксирован.
"""

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import List

import pandas as pd

from config import DeconvConfig, RuntimeConfig, TrainConfig, conf, load_run_config
from db.case_store import prepare_output_dir, read_case, write_case
from handlers.fit import METHODS, fit_case, save_result
from handlers.phantom import check_sweep_axes
from services.errors import PerfusionError
from services.logger import run_logger
from services.metrics import cohort_detection, detection_row, detection_table
from services.phantom import PhantomSpec, generate

SUMMARY_COLUMNS = ["case", "method", "param", "roi", "nmae", "psnr", "dt", "seed"]


def _cell_tag(psnr, dt, seed) -> str:
    psnr_tag = "inf" if psnr is None else f"{psnr:g}"
    return f"psnr{psnr_tag}_dt{dt:g}_seed{seed}"


def run_cell(task: dict) -> dict:
    """Одна ячейка сетки; выполняется в отдельном процессе."""
    started = time.perf_counter()
    case = read_case(task["case_dir"])
    runtime = RuntimeConfig(**task["runtime"])
    train_cfg = TrainConfig.from_dict(task["train"])
    deconv_cfg = DeconvConfig.from_dict(task["deconv"])
    try:
        result, network = fit_case(case, task["method"], train_cfg, deconv_cfg, runtime)
    except PerfusionError as e:
        run_logger.log_error("Sweep", e, f"{task['tag']} / {task['method']}")
        return {"task": task, "error": str(e)}
    save_result(result, network, case, task["out_dir"], force=task["force"])
    meta = {"psnr": task["psnr"], "dt": task["dt"], "seed": task["seed"]}
    nmae = result.metrics.assign(**meta)[SUMMARY_COLUMNS]
    detection = detection_row(result.maps, case.ground_truth, case.case_id, task["method"])
    coverage = result.coverage.assign(**meta) if result.coverage is not None else None
    run_logger.log_info("Sweep", f"{task['tag']} / {task['method']} done in {time.perf_counter() - started:.1f}s")
    return {"task": task, "nmae": nmae, "detection": detection, "coverage": coverage}


def build_tasks(args, out: Path, train_cfg: TrainConfig, deconv_cfg: DeconvConfig) -> List[dict]:
    psnrs = [None if args.noiseless else p for p in args.psnr]
    tasks = []
    for psnr in dict.fromkeys(psnrs):
        for dt in args.dt:
            for seed in args.seeds:
                tag = _cell_tag(psnr, dt, seed)
                spec = PhantomSpec(dims=tuple(args.dims), dt=dt, psnr=psnr, seed=seed)
                case, _ = generate(spec)
                case_dir = write_case(case, out / "cases" / tag, force=args.force)
                for method in args.methods:
                    tasks.append({
                        "tag": tag,
                        "psnr": psnr,
                        "dt": dt,
                        "seed": seed,
                        "method": method,
                        "case_dir": str(case_dir),
                        "out_dir": str(out / "cells" / tag / method),
                        "force": args.force,
                        "train": train_cfg.to_dict(),
                        "deconv": asdict(deconv_cfg),
                        "runtime": asdict(conf.runtime),
                    })
    return tasks


def register(subparsers):
    p = subparsers.add_parser("sweep", help="run methods over a PSNR x dt x seed grid of phantoms")
    p.add_argument("--psnr", type=float, nargs="+", default=[18.0, 21.0, 24.0, 27.0])
    p.add_argument("--dt", type=float, nargs="+", default=[1.0, 2.0, 3.0, 4.0])
    p.add_argument("--methods", nargs="+", choices=METHODS, default=["svd", "bcsvd", "boxnlr", "eppinn"])
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--dims", type=int, nargs=3, default=(48, 48, 4), metavar=("X", "Y", "Z"))
    p.add_argument("--noiseless", action="store_true")
    p.add_argument("--config", default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--workers", type=int, default=1, help="process pool size, 1 = serial")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", default=conf.runtime.allow_overwrite)
    p.set_defaults(handler=run, parser=p)


def run(args) -> None:
    check_sweep_axes(args.parser, args.dt, [None] if args.noiseless else args.psnr, args.force)
    if args.workers < 1:
        args.parser.error("--workers must be >= 1")
    train_cfg, deconv_cfg = load_run_config(args.config)
    train_cfg = train_cfg.with_overrides(iterations=args.iterations)
    out = prepare_output_dir(args.out, force=args.force)
    started = time.perf_counter()
    tasks = build_tasks(args, out, train_cfg, deconv_cfg)
    run_logger.log_info("Sweep", f"{len(tasks)} cells, {args.workers} worker(s)")

    if args.workers == 1:
        outcomes = [run_cell(task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            outcomes = list(pool.map(run_cell, tasks))

    failed = [o for o in outcomes if "error" in o]
    done = [o for o in outcomes if "error" not in o]
    summary = pd.concat([o["nmae"] for o in done], ignore_index=True) if done else pd.DataFrame(columns=SUMMARY_COLUMNS)
    summary.to_csv(out / "summary.csv", index=False)
    detections = detection_table([o["detection"] for o in done])
    detections.to_csv(out / "detection_summary.csv", index=False)
    if not detections.empty:
        cohort_detection(detections).to_csv(out / "detection_cohort.csv", index=False)
    coverages = [o["coverage"] for o in done if o["coverage"] is not None]
    if coverages:
        pd.concat(coverages, ignore_index=True).to_csv(out / "coverage_summary.csv", index=False)
    if failed:
        pd.DataFrame(
            [{"tag": o["task"]["tag"], "method": o["task"]["method"], "error": o["error"]} for o in failed]
        ).to_csv(out / "failures.csv", index=False)
    run_logger.log_info(
        "Sweep", f"finished in {time.perf_counter() - started:.1f}s", f"{len(done)} ok, {len(failed)} failed"
    )
