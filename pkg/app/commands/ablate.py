"""ablate: probe ablation table over perturbation, MM, MS, resolution and masking ratio."""

import argparse

from app.commands.common import benchmark_dataset, model_flags, probe_models
from app.core.logging_config import logger
from app.schemas.run_config import RunConfig
from app.services.ablation import run_ablation
from app.services.result_formatter import RunArtifacts, write_table


def add_parser(subparsers, parents) -> None:
    parser = subparsers.add_parser("ablate", parents=parents, help="Run the probe ablation grid")
    model_flags(parser)
    parser.set_defaults(handler=run)


def run(config: RunConfig, args: argparse.Namespace) -> int:
    artifacts = RunArtifacts(config.output_dir, config, "ablate")
    artifacts.add_inputs([args.rgb_checkpoint or config.joint.rgb_checkpoint, args.joint_checkpoint])
    # The learned cells need a generator even when the run config names a fixed source
    needs_generator = "learned" in config.ablate.perturbations
    probe_config = config.probe.model_copy(update={"perturbation": "learned" if needs_generator else "fixed_square"})
    model, generator, probe = probe_models(config.model_copy(update={"probe": probe_config}), args)
    table = run_ablation(model, benchmark_dataset(config), config.ablate, config.eval, probe, generator, config.seed)
    write_table(table, config.output_dir / "ablation")
    logger.info("\n" + table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    artifacts.finalize()
    return 0
