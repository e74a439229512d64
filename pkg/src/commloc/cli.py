"""Command-line driver for the staged analysis pipeline.

Usage: commloc <stage> [--config FILE] [--out DIR] [--model KIND ...]
[--strategy NAME] [--communities-file FILE], where stage is one of
synth | ingest | communities | influence | diversity | train | evaluate | all.
Exit codes: 0 success, 2 config error, 3 missing prior-stage artifact,
4 data error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .corpus import CorpusError
from .pipeline import STAGE_ALL, STAGE_ORDER, PipelineError, run_stage
from .predict import LOGISTIC_MODELS, MODEL_PSMM, STRATEGIES
from .synth import SpecError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_DATA = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="commloc",
        description="Community-centric mobility analysis and location prediction.",
    )
    parser.add_argument(
        "stage",
        choices=list(STAGE_ORDER) + [STAGE_ALL],
        help="pipeline stage to run ('all' runs every stage in order)",
    )
    parser.add_argument(
        "--config",
        metavar="FILE",
        default=None,
        help="JSON config file; unset keys fall back to defaults, "
        "and COMMLOC_* environment variables override both",
    )
    parser.add_argument(
        "--out",
        metavar="DIR",
        default="out",
        help="artifact directory (default: ./out)",
    )
    parser.add_argument(
        "--communities-file",
        metavar="FILE",
        default=None,
        help="precomputed partition file (owner<TAB>friend<TAB>index) used by "
        "the communities stage instead of running detection",
    )
    parser.add_argument(
        "--model",
        action="append",
        choices=list(LOGISTIC_MODELS) + [MODEL_PSMM],
        default=None,
        help="restrict train/evaluate to this model kind (repeatable; "
        "default: the configured model list)",
    )
    parser.add_argument(
        "--strategy",
        choices=list(STRATEGIES),
        default=None,
        help="community-choosing strategy for train/evaluate "
        "(default: the configured strategy)",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except (ConfigError, SpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.model:
        cfg["predict"]["models"] = list(dict.fromkeys(args.model))
    if args.strategy:
        cfg["predict"]["strategy"] = args.strategy
    try:
        written = run_stage(args.stage, cfg, Path(args.out), args.communities_file)
    except (ConfigError, SpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except CorpusError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    for p in written:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
