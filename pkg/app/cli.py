from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List

from app.worker import StageCancelled, StageError, StageRunner
from core.config import PipelineConfig, load_config, validate_config, validate_paths
from core.eliminate import format_report

logger = logging.getLogger("irs")

EXIT_OK = 0
EXIT_STAGE_FAILED = 1
EXIT_USAGE = 2


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Pipeline config (.toml or .json).")
    common.add_argument("--seed", type=int, help="Master seed; overrides the config.")
    common.add_argument("--jobs", type=positive_int, help="Worker-pool width; default is the CPU count.")
    common.add_argument("--work-dir", help="Directory holding the RIR, segment and source banks.")
    common.add_argument("--output-dir", help="Directory receiving generated folds.")
    common.add_argument("--verbose", action="store_true", help="Debug logging.")

    parser = argparse.ArgumentParser(
        prog="irs",
        description="Impulse response simulation augmentation for spatial audio datasets.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    simulate = sub.add_parser("simulate-rir", parents=[common], help="Simulate the Ambisonics RIR bank.")
    simulate.add_argument("--count", type=positive_int, help="RIRs per room.")
    simulate.add_argument("--rooms", type=positive_int, help="Number of simulated rooms.")
    simulate.add_argument("--array", help="Array geometry file (radius_m= header, then index az el).")

    extract = sub.add_parser("extract", parents=[common], help="Cut static single-source events from the dataset.")
    extract.add_argument("--audio", help="Dataset audio directory.")
    extract.add_argument("--metadata", help="Dataset metadata directory.")

    eliminate = sub.add_parser("eliminate", parents=[common], help="Drop events overlapped by interference.")
    eliminate.add_argument("--detector", help="accept-all, reject-all, energy[:dbfs] or predictions:<csv>.")

    sub.add_parser("enhance", parents=[common], help="CGMM/MVDR-enhance the kept events into the source bank.")

    augment = sub.add_parser("augment", parents=[common], help="Render new folds from the source and RIR banks.")
    augment.add_argument("--folds", type=int, help="Number of folds to generate.")
    augment.add_argument("--clips", type=positive_int, help="Clips per fold.")
    augment.add_argument("--no-noise", action="store_true", help="Render without diffuse noise.")

    sub.add_parser("inspect", parents=[common], help="Print bank statistics and the elimination report.")

    run_all = sub.add_parser("run-all", parents=[common], help="Run every stage in order.")
    run_all.add_argument("--audio", help="Dataset audio directory.")
    run_all.add_argument("--metadata", help="Dataset metadata directory.")
    return parser


def _configure(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(Path(args.config)) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.jobs is not None:
        cfg.jobs = args.jobs
    if args.work_dir:
        cfg.paths.work_dir = args.work_dir
    if args.output_dir:
        cfg.paths.output_dir = args.output_dir
    if getattr(args, "audio", None):
        cfg.paths.dataset_audio = args.audio
    if getattr(args, "metadata", None):
        cfg.paths.dataset_metadata = args.metadata
    if getattr(args, "array", None):
        cfg.paths.array_file = args.array
    if getattr(args, "detector", None):
        cfg.elimination.detector = args.detector
    if getattr(args, "folds", None) is not None:
        cfg.folds.count = args.folds
    if getattr(args, "clips", None) is not None:
        cfg.folds.clips_per_fold = args.clips
    if getattr(args, "no_noise", False):
        cfg.render.noise_enabled = False
    validate_config(cfg)
    validate_paths(cfg, needs_dataset=args.command in ("extract", "run-all"))
    return cfg


def main(argv: List[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")

    try:
        cfg = _configure(args)
    except (ValueError, FileNotFoundError) as exc:
        parser.print_usage(sys.stderr)
        print(f"irs: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    runner = StageRunner(cfg, log=logger.info, show_progress=sys.stderr.isatty())
    try:
        if args.command == "simulate-rir":
            bank = runner.run("simulate-rir", count=args.count, rooms=args.rooms)
            print(f"{len(bank)} RIRs in {cfg.paths.rir_bank}")
        elif args.command == "extract":
            count = runner.run("extract")
            print(f"{count} events in {cfg.paths.segment_bank}")
        elif args.command == "eliminate":
            print(format_report(runner.run("eliminate")), end="")
        elif args.command == "enhance":
            count = runner.run("enhance")
            print(f"{count} sources in {cfg.paths.source_bank}")
        elif args.command == "augment":
            for fold_dir in runner.run("augment"):
                print(fold_dir)
        elif args.command == "inspect":
            print(runner.run("inspect"), end="")
        elif args.command == "run-all":
            print(json.dumps(runner.run("run-all"), indent=2))
    except StageError as exc:
        logger.error("%s", exc)
        logger.debug("Cause", exc_info=exc.cause)
        return EXIT_STAGE_FAILED
    except StageCancelled:
        logger.error("Cancelled")
        return EXIT_STAGE_FAILED
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
