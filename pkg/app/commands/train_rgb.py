"""train-rgb: pretrain the RGB next-frame predictor."""

import argparse
import json

import pandas as pd

from app.commands.common import training_dataset
from app.schemas.run_config import RunConfig
from app.services.plots import plot_loss_curves
from app.services.result_formatter import RunArtifacts
from app.services.rgb_predictor import train_rgb


def add_parser(subparsers, parents) -> None:
    parser = subparsers.add_parser("train-rgb", parents=parents, help="Pretrain the RGB predictor")
    parser.add_argument("--max-steps", type=int, default=None, help="Stop after this many total steps")
    parser.set_defaults(handler=run)


def run(config: RunConfig, args: argparse.Namespace) -> int:
    artifacts = RunArtifacts(config.output_dir, config, "train-rgb")
    artifacts.add_inputs([config.rgb.resume])
    _, result = train_rgb(
        config.rgb,
        training_dataset(config),
        config.output_dir / "checkpoints",
        seed=config.seed,
        jobs=config.jobs,
        device=config.device,
        max_steps=args.max_steps,
    )
    plot_loss_curves(pd.DataFrame(result.history), config.output_dir / "loss", "RGB predictor MSE")
    summary = {
        "initial_val_loss": result.initial_val_loss,
        "final_val_loss": result.final_val_loss,
        "val_improvement": result.val_improvement,
        "param_hash": result.param_hash,
        "checkpoints": [str(p) for p in result.checkpoints],
    }
    (config.output_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    artifacts.finalize()
    return 0
