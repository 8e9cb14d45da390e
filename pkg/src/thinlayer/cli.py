"""Command line entry point: one subcommand per stage, plus ``all``.

    thinlayer <stage> --config run.toml [--out-dir DIR] [--stages a,b] [--threads N]

Exit codes: 0 ok, 1 invalid configuration, 2 solver failure, 3 an acceptance
check recorded in the manifest failed.
"""
from __future__ import annotations

import argparse
import os
import sys

from .config import load_config
from .errors import ConfigParseError, ConfigValidationError
from .pipeline import STAGES, run_pipeline

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CHECK = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="thinlayer",
                                 description="Thin porous layer homogenisation pipeline")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in STAGES + ("all",):
        sp = sub.add_parser(name, help=f"run the {name} stage" if name != "all"
                            else "run every stage")
        sp.add_argument("--config", required=True, help="TOML run configuration")
        sp.add_argument("--out-dir", help="output directory (default: output.dir)")
        sp.add_argument("--stages", help="comma separated stage list, overrides the subcommand")
        sp.add_argument("--threads", type=int,
                        help="worker pool size (env THINLAYER_THREADS)")
        sp.add_argument("--cache-dir", help="stage cache (env THINLAYER_CACHE_DIR)")
        sp.add_argument("--no-cache", action="store_true", help="recompute every stage")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigValidationError as exc:
        print("invalid configuration:", file=sys.stderr)
        for v in exc.violations:
            print(f"  - {v}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigParseError as exc:
        print(f"cannot read configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.stages:
        stages = [s.strip() for s in args.stages.split(",") if s.strip()]
    else:
        stages = "all" if args.command == "all" else [args.command]
    threads = args.threads or int(os.environ.get("THINLAYER_THREADS", 0)) or None
    try:
        man = run_pipeline(cfg, stages, out_dir=args.out_dir, cache_dir=args.cache_dir,
                           workers=threads, use_cache=not args.no_cache)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    for name, rec in man.stages.items():
        status = rec["status"] + (" (cached)" if rec.get("cache_hit") else "")
        print(f"{name:10s} {status:14s} {man.timings.get(name, 0.0):8.2f}s")
        if rec["status"] == "failed":
            print(f"  {rec['error']}", file=sys.stderr)
    if man.failed:
        return EXIT_SOLVER
    if man.failed_checks:
        print("failed checks: " + ", ".join(man.failed_checks), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
