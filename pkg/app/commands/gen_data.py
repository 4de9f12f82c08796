"""gen-data: sprite videos, point tracks and dense motion truth."""

import argparse

import numpy as np

from app.commands.common import generate_benchmark
from app.core.logging_config import logger
from app.schemas.run_config import RunConfig
from app.services.result_formatter import RunArtifacts
from app.services.track_dataset import save_track_dataset


def add_parser(subparsers, parents) -> None:
    parser = subparsers.add_parser("gen-data", parents=parents, help="Generate the sprite corpus")
    parser.set_defaults(handler=run)


def run(config: RunConfig, args: argparse.Namespace) -> int:
    """
    Writes <output_dir>/corpus/tracks.json with one PNG directory per video,
    and per video truth_flow.npy [T-1, H, W, 2] and truth_occluded.npy [T-1, H, W].
    """
    artifacts = RunArtifacts(config.output_dir, config, "gen-data")
    corpus_dir = config.output_dir / "corpus"
    dataset, flows, occlusions = generate_benchmark(config.corpus, config.seed)
    save_track_dataset(dataset, corpus_dir / "tracks.json")
    for video_id, flow, occluded in zip(dataset.video_ids, flows, occlusions):
        np.save(corpus_dir / video_id / "truth_flow.npy", flow)
        np.save(corpus_dir / video_id / "truth_occluded.npy", occluded)
    logger.info(f"Generated {len(dataset)} videos into {corpus_dir}")
    artifacts.finalize()
    return 0
