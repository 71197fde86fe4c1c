"""Command line entry point: ``stealthprobe run <scenario-file>...``."""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Optional

from .config import load_scenario
from .errors import ConfigError
from .pipeline import EXIT_MODEL, run_scenario


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stealthprobe", description="Probing-attack scenario runner.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one or more scenario files")
    run.add_argument("scenarios", nargs="+", metavar="scenario-file")
    run.add_argument("--out-dir", default=".", help="directory for trace and report files (default: .)")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--h-step", type=float, help="override the base grid step")
    run.add_argument("--periods", type=int, help="override the number of periods")
    run.add_argument("--batch", action="store_true", help="run the scenarios in parallel processes")
    return parser


def _run_one(path: str, out_dir: str, overrides: dict) -> tuple:
    try:
        cfg = load_scenario(path).with_overrides(**overrides)
    except ConfigError as exc:
        return path, EXIT_MODEL, f"config error: {exc}"
    result = run_scenario(cfg, out_dir)
    err = result.report.get("error")
    detail = "pass" if result.status == 0 else (
        f"{err['code']}" + (f" ({err['binding']})" if err.get("binding") else "") + f": {err['message']}"
        if err else "verdict failure")
    return path, result.status, detail


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {"seed": args.seed, "h_step": args.h_step, "periods": args.periods}
    jobs = [(p, args.out_dir, overrides) for p in args.scenarios]
    if args.batch and len(jobs) > 1:
        with ProcessPoolExecutor() as pool:
            results = list(pool.map(_run_one, *zip(*jobs)))
    else:
        results = [_run_one(*job) for job in jobs]
    for path, status, detail in results:
        print(f"{path}: exit {status} {detail}")
    return max(status for _, status, _ in results)


if __name__ == "__main__":
    sys.exit(main())
