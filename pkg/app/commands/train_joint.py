"""train-joint: jointly train the perturbation generator and the flow-conditioned predictor."""

import argparse
import json
from pathlib import Path

import pandas as pd

from app.commands.common import load_frozen_rgb, training_dataset
from app.schemas.run_config import RunConfig
from app.services.flow_predictor import joint_train
from app.services.plots import plot_loss_curves
from app.services.result_formatter import RunArtifacts


def add_parser(subparsers, parents) -> None:
    parser = subparsers.add_parser("train-joint", parents=parents, help="Joint bootstrap training")
    parser.add_argument("--rgb-checkpoint", type=Path, default=None, help="Frozen RGB predictor checkpoint")
    parser.add_argument("--max-steps", type=int, default=None, help="Stop after this many total steps")
    parser.set_defaults(handler=run)


def run(config: RunConfig, args: argparse.Namespace) -> int:
    rgb_path = args.rgb_checkpoint or config.joint.rgb_checkpoint
    rgb = load_frozen_rgb(rgb_path)
    artifacts = RunArtifacts(config.output_dir, config, "train-joint")
    artifacts.add_inputs([rgb_path, config.joint.resume])
    _, result = joint_train(
        rgb,
        config.joint,
        config.probe,
        training_dataset(config, "joint-train"),
        config.output_dir / "checkpoints",
        seed=config.seed,
        jobs=config.jobs,
        device=config.device,
        max_steps=args.max_steps,
    )
    plot_loss_curves(pd.DataFrame(result.history), config.output_dir / "loss", "joint training")
    summary = {
        "initial_val_loss": result.initial_val_loss,
        "final_val_loss": result.final_val_loss,
        "initial_flow_error": result.initial_flow_error,
        "final_flow_error": result.final_flow_error,
        "param_hash": result.param_hash,
        "checkpoints": [str(p) for p in result.checkpoints],
        "maps": [str(p) for p in result.maps],
    }
    (config.output_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    artifacts.finalize()
    return 0
