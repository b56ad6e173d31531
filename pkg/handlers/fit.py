# handlers/fit.py
"""Команда fit: запускает один метод на кейсе и пишет ResultBundle."""

from dataclasses import asdict
from pathlib import Path
from typing import Optional, Tuple

from config import ABLATION_FLAGS, DeconvConfig, RuntimeConfig, TrainConfig, conf, load_run_config
from db.case_store import prepare_output_dir, read_case, write_results
from db.models import CaseBundle, ResultBundle
from networks import NetworkBundle, save_checkpoint
from services.classical import deconvolve_case
from services.errors import TrainingDiverged
from services.logger import run_logger
from services.metrics import nmae_table
from services.trainer import train_case

NETWORK_METHODS = ("eppinn", "pinn")
CLASSICAL_METHODS = ("svd", "bcsvd", "boxnlr")
METHODS = NETWORK_METHODS + CLASSICAL_METHODS


def fit_case(
    case: CaseBundle,
    method: str,
    train_cfg: TrainConfig = None,
    deconv_cfg: DeconvConfig = None,
    runtime: RuntimeConfig = None,
) -> Tuple[ResultBundle, Optional[NetworkBundle]]:
    """Диспетчер методов. pinn = eppinn без эвиденциальной головы."""
    train_cfg = train_cfg or TrainConfig()
    deconv_cfg = deconv_cfg or DeconvConfig()
    if method in NETWORK_METHODS:
        if method == "pinn":
            train_cfg = train_cfg.with_overrides(no_evidential=True)
        trained = train_case(case, train_cfg, runtime, method=method)
        result = ResultBundle(
            method=method,
            maps=trained.maps,
            nig=trained.nig,
            trace=trained.trace,
            coverage=trained.coverage,
            resolved_config=train_cfg.to_dict(),
            summary=trained.summary,
        )
        network = trained.bundle
    else:
        maps, info = deconvolve_case(case, method, deconv_cfg)
        result = ResultBundle(method=method, maps=maps, resolved_config={"deconv": asdict(deconv_cfg)}, summary=info)
        network = None
    if case.ground_truth is not None:
        result.metrics = nmae_table(result.maps, case.ground_truth, case.case_id, method)
    return result, network


def save_result(result: ResultBundle, network: Optional[NetworkBundle], case: CaseBundle, out, force: bool = False) -> Path:
    out = write_results(result, out, case.grid_shape, force=force)
    if network is not None:
        save_checkpoint(network, out / "checkpoint", step=result.summary.get("iterations", 0),
                        extra={"signal_scale": result.summary.get("signal_scale")})
    return out


def register(subparsers):
    p = subparsers.add_parser("fit", help="estimate perfusion maps for one case")
    p.add_argument("case_dir")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--config", default=None, help="JSON with TrainConfig fields and an optional 'deconv' object")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--aif-pretrain-iters", type=int, default=None)
    p.add_argument("--batch-samples", type=int, default=None)
    p.add_argument("--force", action="store_true", default=conf.runtime.allow_overwrite)
    for flag in ABLATION_FLAGS:
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, action="store_true", default=None)
    p.set_defaults(handler=run, parser=p)


def run(args) -> None:
    train_cfg, deconv_cfg = load_run_config(args.config)
    overrides = {
        "seed": args.seed,
        "iterations": args.iterations,
        "aif_pretrain_iters": args.aif_pretrain_iters,
        "batch_samples": args.batch_samples,
    }
    overrides.update({flag: getattr(args, flag) for flag in ABLATION_FLAGS})
    train_cfg = train_cfg.with_overrides(**overrides)
    case = read_case(args.case_dir)
    try:
        result, network = fit_case(case, args.method, train_cfg, deconv_cfg, conf.runtime)
    except TrainingDiverged as e:
        # Частичный trace сохраняем рядом, затем ошибка уходит в main (exit 1)
        if e.trace is not None:
            out = prepare_output_dir(args.out, force=args.force)
            e.trace.to_csv(out / "trace.csv", index=False)
            run_logger.log_error("Fit", e, f"partial trace written to {out / 'trace.csv'}")
        raise
    out = save_result(result, network, case, args.out, force=args.force)
    run_logger.log_case_event(case.case_id, f"{args.method} results written", str(out))
