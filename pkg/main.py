# main.py
import argparse
import sys

from config import conf
from handlers import register_all
from services.errors import PerfusionError
from services.logger import run_logger


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eppinn", description="CT perfusion maps from 4D CTP: EPPINN and classical baselines")
    parser.add_argument("--log-level", default=conf.runtime.log_level)
    parser.add_argument("--threads", type=int, default=conf.runtime.threads, help="torch threads (EPPINN_THREADS)")
    subparsers = parser.add_subparsers(dest="command", required=True)
    register_all(subparsers)
    return parser


def main(argv=None) -> int:
    """0 ok, 1 runtime failure (PerfusionError), 2 usage (argparse)."""
    parser = build_parser()
    args = parser.parse_args(argv)
    run_logger.set_level(args.log_level)
    conf.runtime.threads = args.threads
    try:
        args.handler(args)
    except PerfusionError as e:
        run_logger.log_error("CLI", e, args.command)
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
