"""
Point-tracking evaluation.

Distances are Euclidean after rescaling both prediction and ground truth to
an eval_resolution x eval_resolution canvas. Thresholds are strict "<".
"""

import math
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.core.logging_config import logger
from app.schemas.corpus import PixelLocation, TrackAnnotation
from app.schemas.metrics import DELTA_THRESHOLDS, EVAL_RESOLUTION, EvalQuery, MetricsReport, PointPrediction


class QueryList(list):
    """Evaluation queries of one video plus the number of points skipped as never visible."""

    def __init__(self, items=(), skipped: int = 0):
        super().__init__(items)
        self.skipped = skipped


def _query(video_id: str, annotation: TrackAnnotation, point: int, query_frame: int, target_frame: int) -> EvalQuery:
    return EvalQuery(
        video_id=video_id,
        point_id=annotation.point_ids[point],
        query_frame=query_frame,
        query_location=annotation.location(point, query_frame),
        target_frame=target_frame,
        gt_location=annotation.location(point, target_frame),
        gt_visible=bool(annotation.visible[point, target_frame]),
    )


def build_first_protocol(annotation: TrackAnnotation, video_id: str) -> QueryList:
    """Each point queried from its first visible frame to every later frame."""
    queries, skipped = [], 0
    for n in range(annotation.num_points):
        shown = np.flatnonzero(annotation.visible[n])
        if shown.size == 0:
            skipped += 1
            continue
        start = int(shown[0])
        queries.extend(_query(video_id, annotation, n, start, t) for t in range(start + 1, annotation.num_frames))
    if skipped:
        logger.warning(f"{video_id}: skipped {skipped} never-visible point(s)")
    return QueryList(queries, skipped)


def build_cfg_protocol(annotation: TrackAnnotation, video_id: str, gap: int = 5) -> QueryList:
    """One query per (point, t) with the point visible at t and t + gap inside the video."""
    if gap < 1:
        raise ValueError(f"gap must be >= 1, got {gap}")
    queries = [
        _query(video_id, annotation, n, t, t + gap)
        for n in range(annotation.num_points)
        for t in range(annotation.num_frames - gap)
        if annotation.visible[n, t]
    ]
    skipped = int((~annotation.visible.any(axis=1)).sum())
    return QueryList(queries, skipped)


def rescale_to_eval_frame(
    locations: np.ndarray,
    native_size: Tuple[int, int],
    eval_resolution: int = EVAL_RESOLUTION,
) -> np.ndarray:
    """
    Scale (row, col) coordinates by (R/H, R/W).

    Plain multiplicative scaling: a native 512 canvas maps (512, 512) to
    (256, 256), i.e. the far edge maps to the far edge.
    """
    H, W = native_size
    scale = np.array([eval_resolution / H, eval_resolution / W])
    return np.asarray(locations, dtype=np.float64) * scale


def _as_arrays(
    queries: Sequence[EvalQuery],
    predictions: Sequence[PointPrediction],
    native_sizes: Optional[Mapping[str, Tuple[int, int]]],
    eval_resolution: int,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(queries) != len(predictions):
        raise ValueError(f"Got {len(queries)} queries but {len(predictions)} predictions")
    errors = np.zeros(len(queries))
    gt_visible = np.array([q.gt_visible for q in queries], dtype=bool)
    pred_visible = np.array([not p.occluded for p in predictions], dtype=bool)
    for i, (q, p) in enumerate(zip(queries, predictions)):
        gt, pred = np.array(q.gt_location, dtype=np.float64), np.array(p.location, dtype=np.float64)
        if native_sizes is not None:
            size = native_sizes[q.video_id]
            gt = rescale_to_eval_frame(gt, size, eval_resolution)
            pred = rescale_to_eval_frame(pred, size, eval_resolution)
        errors[i] = math.hypot(*(pred - gt))
    return errors, gt_visible, pred_visible


def _ratio(numerator: int, denominator: int) -> Optional[float]:
    return numerator / denominator if denominator else None


def compute_metrics(
    queries: Sequence[EvalQuery],
    predictions: Sequence[PointPrediction],
    thresholds: Sequence[float] = DELTA_THRESHOLDS,
    native_sizes: Optional[Mapping[str, Tuple[int, int]]] = None,
    eval_resolution: int = EVAL_RESOLUTION,
) -> MetricsReport:
    """
    AJ, AD, delta-avg, OA and OF1 over matched queries and predictions.

    Args:
        queries: Evaluation queries
        predictions: One prediction per query, same order
        thresholds: Pixel thresholds (strict "<") at eval resolution
        native_sizes: (H, W) per video id; locations are taken as already
            at eval resolution when omitted
        eval_resolution: Side of the square evaluation canvas

    Returns:
        MetricsReport; distance metrics are None without gt-visible queries
    """
    errors, gt_visible, pred_visible = _as_arrays(queries, predictions, native_sizes, eval_resolution)
    gt_occluded, pred_occluded = ~gt_visible, ~pred_visible
    n_visible = int(gt_visible.sum())

    fractions: Dict[str, Optional[float]] = {}
    jaccards: Dict[str, Optional[float]] = {}
    for threshold in thresholds:
        within = errors < threshold
        true_pos = int((gt_visible & pred_visible & within).sum())
        false_pos = int((pred_visible & (gt_occluded | ~within)).sum())
        false_neg = int((gt_visible & (pred_occluded | ~within)).sum())
        fractions[str(threshold)] = _ratio(int((within & gt_visible).sum()), n_visible)
        jaccards[str(threshold)] = _ratio(true_pos, true_pos + false_pos + false_neg)

    def _mean(values: Dict[str, Optional[float]]) -> Optional[float]:
        known = [v for v in values.values() if v is not None]
        return math.fsum(known) / len(known) if known and len(known) == len(values) else None

    occ_tp = int((pred_occluded & gt_occluded).sum())
    occ_fp = int((pred_occluded & gt_visible).sum())
    occ_fn = int((pred_visible & gt_occluded).sum())
    return MetricsReport(
        average_jaccard=_mean(jaccards),
        average_distance=math.fsum(errors[gt_visible]) / n_visible if n_visible else None,
        delta_avg=_mean(fractions),
        occlusion_accuracy=_ratio(int((pred_occluded == gt_occluded).sum()), len(queries)),
        occlusion_f1=_ratio(2 * occ_tp, 2 * occ_tp + occ_fp + occ_fn),
        delta_fractions=fractions,
        jaccard_per_threshold=jaccards,
        num_queries=len(queries),
        num_gt_visible=n_visible,
        num_gt_occluded=int(gt_occluded.sum()),
        num_pred_occluded=int(pred_occluded.sum()),
    )


def cycle_consistency_occlusion(
    forward: Callable[[PixelLocation], PixelLocation],
    backward: Callable[[PixelLocation], PixelLocation],
    p1: PixelLocation,
    canvas: Tuple[int, int],
    threshold: float = 6.0,
    eval_resolution: int = EVAL_RESOLUTION,
) -> bool:
    """
    Occluded iff the forward-then-backward round trip misses p1 by more than
    `threshold` pixels (strict ">"), measured at eval resolution.

    `canvas` is the native (H, W) of the video; offsets are rescaled from it.
    A forward estimate outside the canvas counts as occluded.
    """
    p2 = forward(p1)
    H, W = canvas
    if not (0 <= p2.row <= H - 1 and 0 <= p2.col <= W - 1):
        return True
    back = backward(p2)
    offset = rescale_to_eval_frame(np.array([back.row - p1.row, back.col - p1.col]), canvas, eval_resolution)
    return bool(math.hypot(*offset) > threshold)


def metrics_by_frame_gap(
    queries: Sequence[EvalQuery],
    predictions: Sequence[PointPrediction],
    thresholds: Sequence[float] = DELTA_THRESHOLDS,
    native_sizes: Optional[Mapping[str, Tuple[int, int]]] = None,
    eval_resolution: int = EVAL_RESOLUTION,
) -> pd.DataFrame:
    """AD and delta-avg per frame gap (target minus query frame), sorted by gap."""
    groups: Dict[int, List[int]] = {}
    for i, q in enumerate(queries):
        groups.setdefault(q.frame_gap, []).append(i)
    rows = []
    for gap in sorted(groups):
        idx = groups[gap]
        report = compute_metrics(
            [queries[i] for i in idx], [predictions[i] for i in idx], thresholds, native_sizes, eval_resolution
        )
        rows.append({
            "frame_gap": gap,
            "num_queries": report.num_queries,
            "num_gt_visible": report.num_gt_visible,
            "AD": report.average_distance,
            "delta_avg": report.delta_avg,
        })
    return pd.DataFrame(rows, columns=["frame_gap", "num_queries", "num_gt_visible", "AD", "delta_avg"])


def precision_vs_threshold(
    queries: Sequence[EvalQuery],
    predictions: Sequence[PointPrediction],
    thresholds: Sequence[float],
    native_sizes: Optional[Mapping[str, Tuple[int, int]]] = None,
    eval_resolution: int = EVAL_RESOLUTION,
) -> pd.DataFrame:
    """Fraction of gt-visible points with error below each threshold."""
    errors, gt_visible, _ = _as_arrays(queries, predictions, native_sizes, eval_resolution)
    n_visible = int(gt_visible.sum())
    rows = [
        {"threshold": float(t), "fraction": _ratio(int(((errors < t) & gt_visible).sum()), n_visible)}
        for t in thresholds
    ]
    return pd.DataFrame(rows, columns=["threshold", "fraction"])
