"""
Sparse flow pseudo-labels: the probe's flow and occlusion for a small
fraction of pixels per corpus pair, in a form a downstream flow network can
be trained on.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from app.core.exceptions import DataError
from app.core.logging_config import logger
from app.core.seeding import derive_seed, round_half_up
from app.models.perturbation import PerturbationGenerator
from app.models.rgb_predictor import NextFramePredictor
from app.schemas.corpus import Frame, FramePair
from app.schemas.probe import ProbeConfig
from app.services.corpus import SpritePairDataset, sample_query_pixels
from app.services.probe import FlowProbe

LABEL_COLUMNS = ("pair", "p1_row", "p1_col", "flow_row", "flow_col", "occluded", "occlusion_score")


@dataclass
class PseudoLabelSet:
    """Labels of one pair: points [n, 2], flows [n, 2], occluded [n]."""

    pair_seed: int
    points: np.ndarray
    flows: np.ndarray
    occluded: np.ndarray

    @property
    def num_labels(self) -> int:
        return int(self.points.shape[0])


def labels_per_pair(height: int, width: int, pixel_fraction: float) -> int:
    """round(H * W * fraction), at least one."""
    return max(1, round_half_up(height * width * pixel_fraction))


def export_pseudolabels(
    model: NextFramePredictor,
    dataset: SpritePairDataset,
    config: ProbeConfig,
    pixel_fraction: float,
    output_dir: Path,
    generator: Optional[PerturbationGenerator] = None,
    num_pairs: Optional[int] = None,
    seed: int = 0,
) -> Path:
    """
    Probe `pixel_fraction` of the pixels of each pair and write the labels.

    Writes labels.csv and labels.npy (columns LABEL_COLUMNS) plus pairs.csv
    with the seed regenerating each pair.

    Returns:
        Path of labels.npy
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    probe = FlowProbe(model, config, generator)
    count = len(dataset) if num_pairs is None else min(num_pairs, len(dataset))
    rows, pairs = [], []
    for i in tqdm(range(count), desc="pseudolabels", disable=None):
        item = dataset[i]
        pair = FramePair(Frame.from_chw(item["first"]), Frame.from_chw(item["second"]))
        H, W = pair.size
        n = labels_per_pair(H, W, pixel_fraction)
        points = sample_query_pixels(pair.first, n, "uniform_random", derive_seed(seed, "pseudolabel", i))
        with torch.no_grad():
            predictions = probe.probe(pair, points, pair_seed=derive_seed(seed, "pseudolabel-probe", i))
        for p in predictions:
            flow = p.flow
            rows.append((i, p.p1.row, p.p1.col, flow[0], flow[1], float(p.occluded), p.occlusion_score))
        pairs.append({"pair": i, "seed": int(item["seed"]), "num_labels": len(predictions)})

    table = pd.DataFrame(rows, columns=list(LABEL_COLUMNS))
    table.to_csv(output_dir / "labels.csv", index=False, float_format="%.6f")
    pd.DataFrame(pairs).to_csv(output_dir / "pairs.csv", index=False)
    path = output_dir / "labels.npy"
    np.save(path, table.to_numpy(dtype=np.float64))
    logger.info(f"Wrote {len(table)} pseudo-labels for {count} pairs to {path}")
    return path


def load_pseudolabels(path: Path) -> Dict[int, PseudoLabelSet]:
    """
    Read labels.npy (and the sibling pairs.csv) back into per-pair label sets.

    Raises:
        DataError: missing file or wrong column count
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"Pseudo-label file not found: {path}")
    array = np.load(path)
    if array.ndim != 2 or array.shape[1] != len(LABEL_COLUMNS):
        raise DataError(f"{path} must be [n, {len(LABEL_COLUMNS)}], got {array.shape}")
    seeds: Dict[int, int] = {}
    pairs_path = path.parent / "pairs.csv"
    if pairs_path.exists():
        seeds = {int(r.pair): int(r.seed) for r in pd.read_csv(pairs_path).itertuples(index=False)}

    labels: Dict[int, PseudoLabelSet] = {}
    pair_index = array[:, 0].astype(np.int64)
    for pair in np.unique(pair_index):
        rows = array[pair_index == pair]
        labels[int(pair)] = PseudoLabelSet(
            pair_seed=seeds.get(int(pair), -1),
            points=rows[:, 1:3],
            flows=rows[:, 3:5],
            occluded=rows[:, 5].astype(bool),
        )
    return labels


def pseudolabel_errors(labels: Dict[int, PseudoLabelSet], dataset: SpritePairDataset) -> List[float]:
    """Endpoint errors of non-occluded labels against the dataset's exact flow."""
    errors = []
    for pair, label in labels.items():
        truth = dataset[pair]["flow"].numpy()
        for (row, col), flow, occluded in zip(label.points, label.flows, label.occluded):
            if occluded:
                continue
            true_flow = truth[int(np.floor(row)), int(np.floor(col))]
            errors.append(float(np.hypot(*(flow - true_flow))))
    return errors
