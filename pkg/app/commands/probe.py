"""probe: flow and occlusion estimates for query points of one frame pair."""

import argparse
from typing import List, Optional

from app.commands.common import benchmark_dataset, model_flags, perturbation_override, probe_models
from app.core.exceptions import ConfigError, DataError
from app.core.logging_config import logger
from app.core.seeding import derive_seed
from app.schemas.corpus import FramePair, PixelLocation
from app.schemas.run_config import RunConfig
from app.services.corpus import generate_sprite_pair, sample_query_pixels
from app.services.evaluation import QueryProber
from app.services.plots import plot_probe_overlay
from app.services.result_formatter import RunArtifacts, predictions_frame, write_table
from app.services.rgb_predictor import make_oracle_warp_predictor


def add_parser(subparsers, parents) -> None:
    parser = subparsers.add_parser("probe", parents=parents, help="Probe flow and occlusion at query points")
    model_flags(parser)
    parser.add_argument("--oracle", action="store_true", help="Probe the oracle-warp stub on a sprite pair")
    parser.add_argument("--pair-seed", type=int, default=0, help="Seed of the sprite pair to probe")
    parser.add_argument("--video", default=None, help="Benchmark video id to take frames from")
    parser.add_argument("--frames", type=int, nargs=2, default=(0, 1), metavar=("QUERY", "TARGET"))
    parser.add_argument("--points", default=None, help='Explicit points "row,col;row,col"')
    parser.add_argument("--num-points", type=int, default=16, help="Sampled points when --points is omitted")
    parser.add_argument("--strategy", choices=["uniform_random", "grid", "foreground_biased"], default="grid")
    parser.set_defaults(handler=run, overrides=perturbation_override)


def parse_points(text: str) -> List[PixelLocation]:
    try:
        return [PixelLocation(*(float(v) for v in item.split(","))) for item in text.split(";") if item.strip()]
    except (TypeError, ValueError) as e:
        raise ConfigError(f'--points must look like "row,col;row,col", got {text!r}') from e


def _pair(config: RunConfig, args: argparse.Namespace) -> FramePair:
    if args.video is None:
        scene = config.corpus.scene.model_copy(update={"seed": derive_seed(config.seed, "probe-pair", args.pair_seed)})
        return generate_sprite_pair(scene)[0]
    dataset = benchmark_dataset(config).select([args.video])
    frames = dataset.videos[0]
    query, target = args.frames
    if not (0 <= query < len(frames) and 0 <= target < len(frames)):
        raise DataError(f"Video {args.video} has {len(frames)} frames; got frames {query}, {target}")
    return FramePair(frames[query], frames[target], gap_frames=max(1, abs(target - query)))


def run(config: RunConfig, args: argparse.Namespace) -> int:
    artifacts = RunArtifacts(config.output_dir, config, "probe")
    if args.oracle:
        if args.video is not None:
            raise ConfigError("--oracle probes a generated sprite pair; drop --video")
        scene = config.corpus.scene.model_copy(update={"seed": derive_seed(config.seed, "probe-pair", args.pair_seed)})
        pair, truth = generate_sprite_pair(scene)
        model = make_oracle_warp_predictor(truth, scene.patch_size, background=pair.second)
        generator, probe = None, config.probe
        if probe.is_learned:
            raise ConfigError("The oracle stub has no trained generator; use a fixed square perturbation")
    else:
        artifacts.add_inputs([args.rgb_checkpoint or config.joint.rgb_checkpoint, args.joint_checkpoint])
        model, generator, probe = probe_models(config, args)
        pair = _pair(config, args)

    points: Optional[List[PixelLocation]] = parse_points(args.points) if args.points else None
    if points is None:
        points = sample_query_pixels(pair.first, args.num_points, args.strategy, derive_seed(config.seed, "probe-points"))
    prober = QueryProber(model, probe, generator, config.seed)
    predictions = prober.probe_pair(pair.first, pair.second, points, derive_seed(config.seed, "probe", args.pair_seed))

    write_table(predictions_frame(predictions), config.output_dir / "predictions")
    plot_probe_overlay(pair, predictions, config.output_dir / "overlay.png")
    occluded = sum(p.occluded for p in predictions)
    logger.info(f"Probed {len(predictions)} points ({occluded} occluded) with {probe.perturbation} perturbation")
    artifacts.finalize()
    return 0
