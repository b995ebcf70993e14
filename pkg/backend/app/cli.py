"""
Command-line entry point.

Usage:
    python backend/main.py generate --config configs/default.conf [--out DIR] [--seed N]
    python backend/main.py train    --config ...
    python backend/main.py eval     --config ... [--scores ink,knn] [--tau-test X] [--tpr X]
    python backend/main.py bench    --config ...
    python backend/main.py sweep    --config ... [--validate]
    python backend/main.py all      --config ...

Exit codes: 0 success, 1 config validation, 2 numerical divergence, 3 I/O.
"""
import argparse
import logging
import sys
from typing import Callable, Dict, List

from pydantic import ValidationError

from app.commands.bench import cmd_bench
from app.commands.evaluate import cmd_eval
from app.commands.generate import cmd_generate
from app.commands.sweep import cmd_sweep
from app.commands.train import cmd_train
from app.core.config import configure_logging, settings
from app.core.errors import ConfigError, DivergenceError
from app.schemas.run import RunConfig, load_run_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGENCE = 2
EXIT_IO = 3

COMMANDS: Dict[str, List[Callable[[RunConfig], object]]] = {
    "generate": [cmd_generate],
    "train": [cmd_train],
    "eval": [cmd_eval],
    "bench": [cmd_bench],
    "sweep": [cmd_sweep],
    "all": [cmd_generate, cmd_train, cmd_eval, cmd_sweep],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=settings.PROJECT_NAME,
        description="Intrinsic-likelihood OOD detection on synthetic hyperspherical data",
    )
    parser.add_argument("command", choices=sorted(COMMANDS), help="Which stage to run")
    parser.add_argument("--config", required=True, help="Path to a key=value run config")
    parser.add_argument("--out", help="Output directory (overrides out_dir)")
    parser.add_argument("--seed", type=int, help="Root seed (overrides seed)")
    parser.add_argument("--scores", help="Comma-separated score kinds (overrides scores)")
    parser.add_argument("--tau-test", type=float, help="Test-time temperature (overrides tau_test)")
    parser.add_argument("--tpr", type=float, help="Target ID true positive rate (overrides target_tpr)")
    parser.add_argument("--validate", action="store_true", help="sweep: also select tau by speckle validation")
    parser.add_argument("--log-level", help="Logging level (default from settings)")
    return parser


def overrides_from(args: argparse.Namespace) -> dict:
    overrides = {
        "out_dir": args.out,
        "seed": args.seed,
        "scores": args.scores,
        "tau_test": args.tau_test,
        "target_tpr": args.tpr,
    }
    if args.validate:
        overrides["validate_tau"] = True
    return overrides


def main(argv: List[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)

    try:
        config = load_run_config(args.config, overrides_from(args))
        for command in COMMANDS[args.command]:
            command(config)
    except (ValidationError, ConfigError) as exc:
        logger.error(f"Invalid configuration: {exc}")
        print(f"❌ Invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        logger.error(f"Training diverged at epoch {exc.epoch} (loss={exc.loss}): {exc}")
        print(f"❌ Training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        logger.error(f"I/O failure: {exc}")
        print(f"❌ I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK
