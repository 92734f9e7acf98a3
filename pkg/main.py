#!/usr/bin/env python3
"""
Continual Learning for Neural Ranking - command line

Generates topical task sequences, trains rankers over them with a chosen
continual-learning strategy, and aggregates the resulting performance matrices.

Usage:
    python main.py taskgen --config <experiment.json> --out <dir> [--seed N]
    python main.py run     --config <experiment.json> [--out <dir>] [--seed N] [--dry-run]
    python main.py report  --out <run root> [--report-dir <dir>]

Example:
    python main.py run --config configs/synthetic_knrm.json --out runs/knrm

Exit codes: 0 on full success, 1 when some runs (or the report) failed, 2 on a config error.
"""

import argparse
import json
import logging
import sys
import time
from typing import List, Optional

import experiments
from config import ConfigError, __version__, load_experiment_config, load_settings
from runner import LOG_FORMAT
from taskdata import DataFormatError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2


def configure_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="main.py", description="Continual learning experiments for neural ranking")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    taskgen = commands.add_parser("taskgen", help="write task files and topic_distances.csv")
    taskgen.add_argument("--config", required=True, help="experiment JSON file")
    taskgen.add_argument("--out", required=True, help="directory for task_<t>.{train,test}.tsv")
    taskgen.add_argument("--seed", type=int, default=0)

    run = commands.add_parser("run", help="run the experiment grid and any configured sweeps")
    run.add_argument("--config", required=True, help="experiment JSON file")
    run.add_argument("--out", help="run root (default: output_dir from the config)")
    run.add_argument("--seed", type=int, help="run only this seed instead of the configured list")
    run.add_argument("--dry-run", action="store_true", help="write manifests without training")

    report = commands.add_parser("report", help="aggregate completed runs into tables")
    report.add_argument("--out", required=True, help="run root to scan")
    report.add_argument("--report-dir", help="where to write the CSVs (default: <run root>/report)")
    return parser


def print_banner(title: str) -> None:
    print("\n" + "=" * 80)
    print(title)
    print("=" * 80 + "\n")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings()
    except ConfigError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_CONFIG
    configure_logging(settings.log_level)

    started = time.time()
    try:
        if args.command == "taskgen":
            print_banner("🔍 Generating tasks")
            summary = experiments.cmd_taskgen(load_experiment_config(args.config), args.out, args.seed)
            code = EXIT_OK
            result = {"tasks": summary["tasks"], "out": args.out}
        elif args.command == "run":
            experiment = load_experiment_config(args.config)
            print_banner(f"🔍 Running experiment {args.config}")
            outcome = experiments.cmd_run(experiment, args.out, args.seed, args.dry_run, settings.threads)
            code = EXIT_OK if outcome.ok else EXIT_PARTIAL
            result = outcome.to_dict()
        else:
            print_banner(f"🔍 Reporting on {args.out}")
            written = experiments.cmd_report(args.out, args.report_dir)
            code = EXIT_OK
            result = {"written": sorted(str(path) for path in written.values())}
    except ConfigError as exc:
        logger.error("❌ %s", exc)
        print(json.dumps({"error": exc.to_payload()}, indent=2))
        return EXIT_CONFIG
    except (DataFormatError, experiments.ReportError) as exc:
        logger.error("❌ %s", exc)
        print(json.dumps({"error": exc.to_payload()}, indent=2))
        return EXIT_PARTIAL

    result["duration_seconds"] = round(time.time() - started, 2)
    print_banner("📄 JSON Output")
    print(json.dumps(result, indent=2, ensure_ascii=False))
    return code


if __name__ == "__main__":
    sys.exit(main())
