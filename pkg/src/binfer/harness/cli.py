"""Command line: ``binfer <task> --config PATH [--seed N] [--out DIR] [--chains N]``."""
from __future__ import annotations

import argparse
import sys

from .config import TASKS
from .experiments import EXIT_CHECK_FAILED, EXIT_INVALID, EXIT_OK, run_experiment
from .oracle_suite import run_oracle_suite


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="binfer", description="Run an approximate-inference experiment.")
    p.add_argument("task", choices=TASKS)
    p.add_argument("--config", help="JSON experiment config (optional for oracle)")
    p.add_argument("--seed", type=int, help="override the config seed (and BINFER_SEED)")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--chains", type=int, default=1, help="independent sampler chains, one process each")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.task == "oracle" and args.config is None:
        failed = 0
        for check in run_oracle_suite():
            print(f"{'PASS' if check.passed else 'FAIL'} {check.name}: {check.detail}")
            failed += not check.passed
        return EXIT_OK if failed == 0 else EXIT_CHECK_FAILED
    if args.config is None:
        print('{"status": "error", "kind": "validation", "message": "--config is required"}', file=sys.stderr)
        return EXIT_INVALID
    code = run_experiment(args.config, seed=args.seed, out_dir=args.out, chains=args.chains)
    if code == EXIT_OK:
        print(f"ok: {args.task}")
    return code


if __name__ == "__main__":
    sys.exit(main())
