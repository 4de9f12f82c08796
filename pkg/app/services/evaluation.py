"""
Probe-based evaluation on annotated track datasets.

Queries are grouped by (video, query frame, target frame) so every frame
pair is probed once for all of its points. Frames whose size differs from
the predictor's are resized, and coordinates are mapped in and out with the
same pixel-centre convention as multiscale crops.
"""

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd
import torch

from app.core.exceptions import DataError
from app.core.logging_config import logger
from app.core.seeding import derive_seed
from app.models.perturbation import PerturbationGenerator
from app.models.rgb_predictor import NextFramePredictor
from app.schemas.corpus import Frame, FramePair, PixelLocation
from app.schemas.metrics import EvalQuery, MetricsReport, PointPrediction
from app.schemas.probe import FlowPrediction, ProbeConfig
from app.schemas.run_config import EvalSection
from app.services.metrics import (
    build_cfg_protocol,
    build_first_protocol,
    compute_metrics,
    cycle_consistency_occlusion,
    metrics_by_frame_gap,
    precision_vs_threshold,
)
from app.services.probe import FlowProbe
from app.services.track_dataset import TrackDataset
from app.utils.geometry import CropTransform

PairKey = Tuple[str, int, int]


@dataclass
class EvaluationResult:
    queries: List[EvalQuery]
    predictions: List[FlowPrediction]
    points: List[PointPrediction]
    report: MetricsReport
    by_gap: pd.DataFrame
    precision: pd.DataFrame


def build_queries(dataset: TrackDataset, section: EvalSection) -> List[EvalQuery]:
    queries: List[EvalQuery] = []
    skipped = 0
    for video_id, annotation in zip(dataset.video_ids, dataset.annotations):
        if section.protocol == "first":
            built = build_first_protocol(annotation, video_id)
        else:
            built = build_cfg_protocol(annotation, video_id, section.cfg_gap)
        queries.extend(built)
        skipped += built.skipped
    logger.info(f"{section.protocol} protocol: {len(queries)} queries over {len(dataset)} videos, {skipped} points skipped")
    return queries


def native_sizes(dataset: TrackDataset) -> Dict[str, Tuple[int, int]]:
    return {vid: (a.height, a.width) for vid, a in zip(dataset.video_ids, dataset.annotations)}


class QueryProber:
    """Runs the probe on (video, frame, frame) groups of points at the predictor's resolution."""

    def __init__(
        self,
        model: NextFramePredictor,
        config: ProbeConfig,
        generator: Optional[PerturbationGenerator] = None,
        seed: int = 0,
    ):
        self.probe = FlowProbe(model, config, generator)
        self.grid = model.grid
        self.seed = seed

    def _transform(self, size: Tuple[int, int]) -> CropTransform:
        H, W = size
        return CropTransform(0, 0, H, W, self.grid.height, self.grid.width)

    def probe_pair(
        self,
        first: Frame,
        second: Frame,
        points: Sequence[PixelLocation],
        pair_seed: int,
    ) -> List[FlowPrediction]:
        """Probe native-resolution points; returned locations are native too."""
        transform = self._transform(first.size)
        pair = FramePair(
            Frame.from_chw(transform.apply(first.to_chw())),
            Frame.from_chw(transform.apply(second.to_chw())),
        )
        h, w = self.grid.height - 1, self.grid.width - 1
        inside = []
        for p in points:
            q = transform.to_crop(p)
            inside.append(PixelLocation(min(max(q.row, 0.0), h), min(max(q.col, 0.0), w)))
        results = self.probe.probe(pair, inside, pair_seed)
        return [
            replace(
                result,
                p1=PixelLocation(float(p.row), float(p.col)),
                p2_hat=transform.from_crop(result.p2_hat),
                scale_trace=[transform.from_crop(s) for s in result.scale_trace],
            )
            for p, result in zip(points, results)
        ]

    def probe_queries(self, dataset: TrackDataset, queries: Sequence[EvalQuery]) -> List[FlowPrediction]:
        """One FlowPrediction per query, in query order."""
        index = {vid: i for i, vid in enumerate(dataset.video_ids)}
        groups: Dict[PairKey, List[int]] = {}
        for i, q in enumerate(queries):
            groups.setdefault((q.video_id, q.query_frame, q.target_frame), []).append(i)

        out: List[Optional[FlowPrediction]] = [None] * len(queries)
        for (video_id, query_frame, target_frame), members in groups.items():
            frames = dataset.videos[index[video_id]]
            results = self.probe_pair(
                frames[query_frame],
                frames[target_frame],
                [queries[i].query_location for i in members],
                derive_seed(self.seed, video_id, query_frame, target_frame),
            )
            for i, result in zip(members, results):
                q = queries[i]
                out[i] = replace(
                    result, video_id=q.video_id, point_id=q.point_id,
                    query_frame=q.query_frame, target_frame=q.target_frame,
                )
        return out

    def cycle_occlusion(
        self,
        dataset: TrackDataset,
        queries: Sequence[EvalQuery],
        predictions: Sequence[FlowPrediction],
        threshold: float,
        eval_resolution: int,
    ) -> List[bool]:
        """Forward-backward consistency flags for every query."""
        index = {vid: i for i, vid in enumerate(dataset.video_ids)}
        sizes = native_sizes(dataset)
        groups: Dict[PairKey, List[int]] = {}
        for i, (q, p) in enumerate(zip(queries, predictions)):
            H, W = sizes[q.video_id]
            if 0 <= p.p2_hat.row <= H - 1 and 0 <= p.p2_hat.col <= W - 1:
                groups.setdefault((q.video_id, q.target_frame, q.query_frame), []).append(i)

        backward: Dict[int, PixelLocation] = {}
        for (video_id, start, end), members in groups.items():
            frames = dataset.videos[index[video_id]]
            results = self.probe_pair(
                frames[start], frames[end],
                [predictions[i].p2_hat for i in members],
                derive_seed(self.seed, "backward", video_id, start, end),
            )
            for i, result in zip(members, results):
                backward[i] = result.p2_hat

        flags = []
        for i, (q, p) in enumerate(zip(queries, predictions)):
            flags.append(cycle_consistency_occlusion(
                lambda _, p2=p.p2_hat: p2,
                lambda _, back=backward.get(i, p.p2_hat): back,
                q.query_location,
                sizes[q.video_id],
                threshold=threshold,
                eval_resolution=eval_resolution,
            ))
        return flags


def evaluate(
    model: NextFramePredictor,
    dataset: TrackDataset,
    section: EvalSection,
    config: ProbeConfig,
    generator: Optional[PerturbationGenerator] = None,
    seed: int = 0,
) -> EvaluationResult:
    """Probe every protocol query and score the predictions."""
    if section.video_ids:
        dataset = dataset.select(section.video_ids)
    queries = build_queries(dataset, section)
    prober = QueryProber(model, config, generator, seed)
    with torch.no_grad():
        predictions = prober.probe_queries(dataset, queries)
        if section.occlusion_source == "cycle":
            flags = prober.cycle_occlusion(
                dataset, queries, predictions, section.cycle_threshold, section.eval_resolution
            )
        else:
            flags = [p.occluded for p in predictions]
    points = [PointPrediction(p.p2_hat, flag) for p, flag in zip(predictions, flags)]
    return score(queries, points, dataset, section, predictions)


def score(
    queries: Sequence[EvalQuery],
    points: Sequence[PointPrediction],
    dataset: TrackDataset,
    section: EvalSection,
    predictions: Sequence[FlowPrediction] = (),
) -> EvaluationResult:
    sizes = native_sizes(dataset)
    args = (section.thresholds, sizes, section.eval_resolution)
    report = compute_metrics(queries, points, *args)
    thresholds = [float(t) for t in range(1, 2 * max(section.thresholds) + 1)]
    return EvaluationResult(
        queries=list(queries),
        predictions=list(predictions),
        points=list(points),
        report=report,
        by_gap=metrics_by_frame_gap(queries, points, *args),
        precision=precision_vs_threshold(queries, points, thresholds, sizes, section.eval_resolution),
    )


def load_prediction_table(path: Path, queries: Sequence[EvalQuery]) -> List[PointPrediction]:
    """
    Match a probe prediction CSV to queries by (video_id, point_id, query_frame, target_frame).

    Raises:
        DataError: unreadable table, missing columns or a query without a prediction
    """
    path = Path(path)
    try:
        table = pd.read_csv(path, dtype={"video_id": str})
    except (OSError, pd.errors.ParserError) as e:
        raise DataError(f"Could not read predictions {path}: {e}") from e
    required = {"video_id", "point_id", "query_frame", "target_frame", "p2_row", "p2_col", "occluded"}
    missing = required - set(table.columns)
    if missing:
        raise DataError(f"Predictions {path} lack columns {sorted(missing)}")
    lookup = {
        (str(r.video_id), int(r.point_id), int(r.query_frame), int(r.target_frame)):
            PointPrediction(PixelLocation(float(r.p2_row), float(r.p2_col)), bool(r.occluded))
        for r in table.itertuples(index=False)
    }
    absent = [q.key for q in queries if q.key not in lookup]
    if absent:
        raise DataError(f"{len(absent)} queries have no prediction in {path}, e.g. {absent[0]}")
    return [lookup[q.key] for q in queries]
