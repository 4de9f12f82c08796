"""export-pseudolabels: sparse probe flow labels for a fraction of pixels per corpus pair."""

import argparse

from app.commands.common import model_flags, perturbation_override, probe_models, training_dataset
from app.schemas.run_config import RunConfig
from app.services.pseudo_labels import export_pseudolabels
from app.services.result_formatter import RunArtifacts


def add_parser(subparsers, parents) -> None:
    parser = subparsers.add_parser("export-pseudolabels", parents=parents, help="Export sparse flow pseudo-labels")
    model_flags(parser)
    parser.add_argument("--pixel-fraction", type=float, default=None, help="Labelled pixel fraction per pair")
    parser.set_defaults(handler=run, overrides=_overrides)


def _overrides(args: argparse.Namespace):
    extra = [f"pseudolabels.pixel_fraction={args.pixel_fraction}"] if args.pixel_fraction is not None else []
    return perturbation_override(args) + extra


def run(config: RunConfig, args: argparse.Namespace) -> int:
    artifacts = RunArtifacts(config.output_dir, config, "export-pseudolabels")
    artifacts.add_inputs([args.rgb_checkpoint or config.joint.rgb_checkpoint, args.joint_checkpoint])
    model, generator, probe = probe_models(config, args)
    export_pseudolabels(
        model,
        training_dataset(config, "pseudolabels"),
        probe,
        config.pseudolabels.pixel_fraction,
        config.output_dir / "pseudolabels",
        generator=generator,
        num_pairs=config.pseudolabels.num_pairs,
        seed=config.seed,
    )
    artifacts.finalize()
    return 0
