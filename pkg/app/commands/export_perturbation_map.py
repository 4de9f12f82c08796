"""export-perturbation-map: generator outputs over a grid of query points."""

import argparse

from app.commands.common import model_flags, probe_models
from app.core.exceptions import ConfigError
from app.core.seeding import derive_seed
from app.schemas.run_config import RunConfig
from app.services.corpus import generate_sprite_pair
from app.services.plots import plot_perturbation_map
from app.services.probe import export_perturbation_map
from app.services.result_formatter import RunArtifacts, write_perturbation_map


def add_parser(subparsers, parents) -> None:
    parser = subparsers.add_parser("export-perturbation-map", parents=parents, help="Export a perturbation map")
    model_flags(parser)
    parser.add_argument("--stride", type=int, default=1, help="Pixel stride between query points")
    parser.add_argument("--pair-seed", type=int, default=0, help="Seed of the sprite pair")
    parser.set_defaults(handler=run)


def run(config: RunConfig, args: argparse.Namespace) -> int:
    if args.stride < 1:
        raise ConfigError(f"--stride must be >= 1, got {args.stride}")
    artifacts = RunArtifacts(config.output_dir, config, "export-perturbation-map")
    artifacts.add_inputs([args.rgb_checkpoint or config.joint.rgb_checkpoint, args.joint_checkpoint])
    learned = config.model_copy(update={"probe": config.probe.model_copy(update={"perturbation": "learned"})})
    model, generator, probe = probe_models(learned, args)
    scene = config.corpus.scene.model_copy(update={"seed": derive_seed(config.seed, "map-pair", args.pair_seed)})
    pair, _ = generate_sprite_pair(scene)
    perturbation_map = export_perturbation_map(generator, model, pair, args.stride, probe, derive_seed(config.seed, "map"))
    write_perturbation_map(perturbation_map, config.output_dir / "perturbation_map.npy")
    plot_perturbation_map(perturbation_map, config.output_dir / "perturbation_map.png")
    artifacts.finalize()
    return 0
