# handlers/phantom.py
"""Команда phantom: генерирует синтетический кейс с ground truth и пишет его на диск."""

import argparse

from config import conf
from db.case_store import write_case
from services.phantom import SWEEP_DTS, SWEEP_PSNR_RANGE, PhantomSpec, generate
from services.logger import run_logger


def check_sweep_axes(parser: argparse.ArgumentParser, dts, psnrs, force: bool):
    """dt вне {1,2,3,4} s и PSNR вне [18, 27] dB отклоняются без --force (exit 2)."""
    if force:
        return
    for dt in dts:
        if dt not in SWEEP_DTS:
            parser.error(f"--dt {dt:g} outside {list(SWEEP_DTS)} (use --force)")
    lo, hi = SWEEP_PSNR_RANGE
    for psnr in psnrs:
        if psnr is not None and not lo <= psnr <= hi:
            parser.error(f"--psnr {psnr:g} outside [{lo:g}, {hi:g}] dB (use --force)")


def register(subparsers):
    p = subparsers.add_parser("phantom", help="generate a synthetic CTP phantom case")
    p.add_argument("--psnr", type=float, default=27.0, help="noise level in dB")
    p.add_argument("--dt", type=float, default=1.0, help="frame interval in seconds")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output case directory")
    p.add_argument("--noiseless", action="store_true")
    p.add_argument("--dims", type=int, nargs=3, default=(48, 48, 4), metavar=("X", "Y", "Z"))
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--aif-scale", type=float, default=1.5, help="gamma-variate scale of the AIF (s)")
    p.add_argument("--force", action="store_true", default=conf.runtime.allow_overwrite)
    p.set_defaults(handler=run, parser=p)


def run(args) -> None:
    psnr = None if args.noiseless else args.psnr
    check_sweep_axes(args.parser, [args.dt], [psnr], args.force)
    spec = PhantomSpec(
        dims=tuple(args.dims),
        duration=args.duration,
        dt=args.dt,
        psnr=psnr,
        seed=args.seed,
        aif_scale=args.aif_scale,
    )
    case, _ = generate(spec)
    out = write_case(case, args.out, force=args.force)
    run_logger.log_case_event(case.case_id, "written", str(out))
