"""
Command-line entry point.

    python main.py <subcommand> [--config FILE ...] [--set key=value ...]
                   [--seed N] [--jobs N] [--output-dir DIR] [--log-level LEVEL]

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric divergence.
"""

import argparse
import sys
import traceback
from typing import List, Optional

import torch

from app.commands import COMMANDS
from app.commands.common import global_flags
from app.core.exceptions import CfProbeError
from app.core.logging_config import logger, set_log_level
from app.core.seeding import seed_everything
from app.schemas.run_config import RunConfig


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfprobe", description="Counterfactual flow probing toolkit")
    subparsers = parser.add_subparsers(dest="command", required=True)
    parents = [global_flags()]
    for command in COMMANDS:
        command.add_parser(subparsers, parents)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    set_log_level(args.log_level)
    try:
        overrides = list(args.set)
        if hasattr(args, "overrides"):
            overrides += args.overrides(args)
        config = RunConfig.resolve(
            args.config,
            overrides,
            {"seed": args.seed, "jobs": args.jobs, "output_dir": args.output_dir},
        )
        seed_everything(config.seed)
        torch.set_num_threads(config.jobs)
        logger.info(f"Running {args.command} (seed {config.seed}) -> {config.output_dir}")
        return args.handler(config, args)
    except CfProbeError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    except Exception:
        logger.error(traceback.format_exc())
        return 1


if __name__ == "__main__":
    sys.exit(main())
