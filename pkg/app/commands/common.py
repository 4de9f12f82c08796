"""
Helpers shared by the CLI command handlers: flags every subcommand accepts,
corpus and benchmark construction, and model loading.
"""

import argparse
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from app.core.config import settings
from app.core.exceptions import ConfigError
from app.core.logging_config import logger
from app.core.seeding import derive_seed
from app.models.perturbation import PerturbationGenerator
from app.models.rgb_predictor import NextFramePredictor, RgbPredictor
from app.schemas.probe import ProbeConfig
from app.schemas.run_config import CorpusSection, RunConfig
from app.services.corpus import SpritePairDataset, generate_sprite_video
from app.services.flow_predictor import load_joint_models
from app.services.rgb_predictor import load_rgb_predictor
from app.services.track_dataset import TrackDataset, load_track_dataset, save_track_dataset

LOG_LEVELS = ["debug", "info", "warning", "error"]


def global_flags() -> argparse.ArgumentParser:
    """Parent parser with the flags shared by every subcommand."""
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", action="append", type=Path, default=[], help="YAML config file (repeatable, later wins)")
    parent.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="Override a dotted config key")
    parent.add_argument("--seed", type=int, default=None, help="Global seed")
    parent.add_argument("--jobs", type=int, default=None, help="Worker threads")
    parent.add_argument("--output-dir", type=Path, default=None, help="Output directory")
    parent.add_argument("--log-level", choices=LOG_LEVELS, default="info", help="Logging verbosity")
    return parent


def model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--rgb-checkpoint", type=Path, default=None, help="RGB predictor checkpoint")
    parser.add_argument("--joint-checkpoint", type=Path, default=None, help="Joint checkpoint with the perturbation generator")
    parser.add_argument(
        "--perturbation", choices=["learned", "fixed_square", "red_square", "green_square"], default=None,
        help="Perturbation source (overrides probe.perturbation)",
    )


def perturbation_override(args: argparse.Namespace) -> List[str]:
    return [f"probe.perturbation={args.perturbation}"] if getattr(args, "perturbation", None) else []


# ---------------------------------------------------------
# Corpora
# ---------------------------------------------------------

def training_dataset(config: RunConfig, tag: str = "train") -> SpritePairDataset:
    corpus = config.corpus
    return SpritePairDataset(
        corpus.scene,
        corpus.train_pairs,
        derive_seed(config.seed, tag),
        static=corpus.static,
        random_resized_crop=corpus.random_resized_crop,
    )


def generate_benchmark(corpus: CorpusSection, seed: int) -> Tuple[TrackDataset, List[np.ndarray], List[np.ndarray]]:
    """
    Sprite videos with point tracks.

    Returns:
        (dataset, flows [T-1, H, W, 2] per video, occlusion [T-1, H, W] per video)
    """
    videos, annotations, ids, flows, occlusions = [], [], [], [], []
    for i in range(corpus.num_videos):
        scene = corpus.scene.model_copy(update={"seed": derive_seed(seed, "video", i)})
        frames, annotation, truths = generate_sprite_video(scene, corpus.num_frames, corpus.points_per_sprite)
        videos.append(frames)
        annotations.append(annotation)
        ids.append(f"sprite_{i:03d}")
        flows.append(np.stack([t.flow for t in truths]).astype(np.float32))
        occlusions.append(np.stack([t.occluded_next for t in truths]))
    return TrackDataset(videos, annotations, ids, metadata={"seed": seed}), flows, occlusions


def benchmark_dataset(config: RunConfig) -> TrackDataset:
    """
    The configured annotated dataset, or the sprite benchmark cached under
    CFPROBE_CACHE_DIR for this corpus configuration and seed.
    """
    corpus = config.corpus
    if corpus.dataset_path is not None:
        return load_track_dataset(corpus.dataset_path, corpus.dataset_format)
    key = derive_seed(config.seed, "benchmark", corpus.model_dump_json())
    path = settings.cache_dir / f"benchmark_{key:010d}" / "tracks.json"
    if not path.exists():
        logger.info(f"Generating sprite benchmark ({corpus.num_videos} videos) into {path.parent}")
        dataset, _, _ = generate_benchmark(corpus, derive_seed(config.seed, "benchmark"))
        save_track_dataset(dataset, path)
    return load_track_dataset(path, "portable_json")


# ---------------------------------------------------------
# Models
# ---------------------------------------------------------

def load_frozen_rgb(path: Optional[Path], interpolate_to: Optional[Tuple[int, int]] = None) -> RgbPredictor:
    if path is None:
        raise ConfigError("An RGB predictor checkpoint is required (--rgb-checkpoint or joint.rgb_checkpoint)")
    return load_rgb_predictor(path, interpolate_to).freeze()


def probe_models(
    config: RunConfig,
    args: argparse.Namespace,
) -> Tuple[NextFramePredictor, Optional[PerturbationGenerator], ProbeConfig]:
    """
    RGB predictor, perturbation generator (learned source only) and the probe
    settings to use with them.

    Raises:
        ConfigError: missing checkpoints
    """
    rgb = load_frozen_rgb(args.rgb_checkpoint or config.joint.rgb_checkpoint)
    probe = config.probe
    if not probe.is_learned:
        return rgb, None, probe
    if args.joint_checkpoint is None:
        raise ConfigError("The learned perturbation needs --joint-checkpoint (or choose a fixed square)")
    generator, _, trained = load_joint_models(args.joint_checkpoint, rgb)
    # Generator shape comes from the checkpoint; everything else from the run config
    probe = probe.model_copy(update={
        "num_gaussians": trained.num_gaussians,
        "generator_hidden": trained.generator_hidden,
    })
    return rgb, generator, probe
