import math

import numpy as np
import pytest

from app.schemas.corpus import PixelLocation, TrackAnnotation
from app.schemas.metrics import DELTA_THRESHOLDS, EvalQuery, PointPrediction
from app.services.metrics import (
    build_cfg_protocol,
    build_first_protocol,
    compute_metrics,
    cycle_consistency_occlusion,
    metrics_by_frame_gap,
    precision_vs_threshold,
    rescale_to_eval_frame,
)


def _query(gt, visible=True, video_id="v", point_id=0, query_frame=0, target_frame=1):
    return EvalQuery(video_id, point_id, query_frame, PixelLocation(0.0, 0.0), target_frame, PixelLocation(*gt), visible)


def _prediction(location, occluded=False):
    return PointPrediction(PixelLocation(*location), occluded)


def test_distance_is_euclidean():
    report = compute_metrics([_query((3.0, 4.0))], [_prediction((0.0, 0.0))])

    assert report.average_distance == 5.0
    assert report.num_gt_visible == 1


def test_hand_enumerated_thresholds():
    queries = [_query((0.0, 0.0), point_id=i) for i in range(3)]
    predictions = [_prediction((0.5, 0.0)), _prediction((3.0, 0.0)), _prediction((20.0, 0.0))]

    report = compute_metrics(queries, predictions)

    assert list(report.delta_fractions.values()) == pytest.approx([1 / 3, 1 / 3, 2 / 3, 2 / 3, 2 / 3])
    assert report.delta_avg == pytest.approx(8 / 15)
    # a point outside a threshold is both a false positive and a false negative
    assert list(report.jaccard_per_threshold.values()) == pytest.approx([0.2, 0.2, 0.5, 0.5, 0.5])
    assert report.average_jaccard == pytest.approx(0.38)
    assert report.average_distance == pytest.approx(23.5 / 3)


def test_occlusion_f1():
    queries = [_query((0.0, 0.0), visible=False, point_id=0), _query((0.0, 0.0), visible=True, point_id=1)]
    predictions = [_prediction((0.0, 0.0), occluded=True), _prediction((0.0, 0.0), occluded=True)]

    report = compute_metrics(queries, predictions)

    assert report.occlusion_f1 == pytest.approx(2 / 3)
    assert report.occlusion_accuracy == 0.5
    assert report.num_gt_occluded == 1
    assert report.num_pred_occluded == 2


def test_perfect_predictions():
    rng = np.random.default_rng(0)
    queries = [
        _query(tuple(rng.uniform(0, 255, 2)), visible=bool(i % 3), point_id=i) for i in range(30)
    ]
    predictions = [_prediction(q.gt_location, occluded=not q.gt_visible) for q in queries]

    report = compute_metrics(queries, predictions)

    assert report.average_jaccard == 1.0
    assert report.average_distance == 0.0
    assert report.delta_avg == 1.0
    assert report.occlusion_accuracy == 1.0
    assert report.occlusion_f1 == 1.0


def test_occluded_ground_truth_is_excluded_from_distance():
    queries = [_query((0.0, 0.0), point_id=0), _query((0.0, 0.0), visible=False, point_id=1)]
    predictions = [_prediction((1.0, 0.0)), _prediction((100.0, 0.0), occluded=True)]

    report = compute_metrics(queries, predictions)

    assert report.average_distance == 1.0
    assert report.delta_fractions["2"] == 1.0


def test_no_visible_ground_truth_leaves_distance_metrics_empty():
    report = compute_metrics([_query((0.0, 0.0), visible=False)], [_prediction((0.0, 0.0), occluded=True)])

    assert report.average_distance is None
    assert report.delta_avg is None
    assert report.occlusion_accuracy == 1.0


def test_mismatched_lengths_are_an_error():
    with pytest.raises(ValueError, match="predictions"):
        compute_metrics([_query((0.0, 0.0))], [])


def _reference_metrics(queries, predictions, thresholds):
    """Per-query loop written directly from the metric definitions."""
    errors = [math.hypot(p.location.row - q.gt_location.row, p.location.col - q.gt_location.col)
              for q, p in zip(queries, predictions)]
    visible_errors = [e for e, q in zip(errors, queries) if q.gt_visible]
    fractions, jaccards = [], []
    for t in thresholds:
        tp = fp = fn = 0
        for e, q, p in zip(errors, queries, predictions):
            within = e < t
            if q.gt_visible and not p.occluded and within:
                tp += 1
            if not p.occluded and (not q.gt_visible or not within):
                fp += 1
            if q.gt_visible and (p.occluded or not within):
                fn += 1
        if visible_errors:
            fractions.append(sum(1 for e in visible_errors if e < t) / len(visible_errors))
        if tp + fp + fn:
            jaccards.append(tp / (tp + fp + fn))
    correct = sum(1 for q, p in zip(queries, predictions) if p.occluded == (not q.gt_visible))
    return {
        "average_distance": math.fsum(visible_errors) / len(visible_errors) if visible_errors else None,
        "delta_avg": math.fsum(fractions) / len(fractions) if visible_errors else None,
        "average_jaccard": math.fsum(jaccards) / len(jaccards) if len(jaccards) == len(thresholds) else None,
        "occlusion_accuracy": correct / len(queries),
    }


def test_matches_per_query_reference_on_random_instances():
    rng = np.random.default_rng(2024)
    for instance in range(1000):
        n = int(rng.integers(1, 8))
        queries, predictions = [], []
        for i in range(n):
            gt = rng.integers(0, 32, 2).astype(float)
            queries.append(_query(tuple(gt), visible=bool(rng.random() < 0.7), point_id=i))
            predictions.append(_prediction(tuple(gt + rng.normal(0, 6, 2)), occluded=bool(rng.random() < 0.3)))

        report = compute_metrics(queries, predictions)
        expected = _reference_metrics(queries, predictions, DELTA_THRESHOLDS)

        for name, value in expected.items():
            assert getattr(report, name) == value, f"instance {instance}: {name}"


def _annotation(visible, height=256, width=256):
    visible = np.asarray(visible, dtype=bool)
    locations = np.arange(visible.size * 2, dtype=np.float64).reshape(*visible.shape, 2)
    return TrackAnnotation(locations, visible, height, width)


def test_first_protocol_starts_at_first_visible_frame():
    annotation = _annotation([[True, True, False], [False, True, True], [False, False, False]])

    queries = build_first_protocol(annotation, "v")

    assert [(q.point_id, q.query_frame, q.target_frame) for q in queries] == [(0, 0, 1), (0, 0, 2), (1, 1, 2)]
    assert [q.gt_visible for q in queries] == [True, False, True]
    assert queries.skipped == 1


def test_cfg_protocol_uses_a_fixed_gap():
    annotation = _annotation([[True] * 7])

    queries = build_cfg_protocol(annotation, "v", gap=5)

    assert [(q.query_frame, q.target_frame) for q in queries] == [(0, 5), (1, 6)]
    assert all(q.frame_gap == 5 for q in queries)


def test_cfg_protocol_on_short_video_is_empty():
    assert list(build_cfg_protocol(_annotation([[True] * 5]), "v", gap=5)) == []


def test_cfg_protocol_skips_frames_where_the_point_is_hidden():
    queries = build_cfg_protocol(_annotation([[False, True, True, True, True, True, True]]), "v", gap=5)

    assert [(q.query_frame, q.target_frame) for q in queries] == [(1, 6)]


def test_rescaling_to_eval_resolution():
    points = np.array([[512.0, 512.0], [100.0, 30.0]])

    assert rescale_to_eval_frame(points, (512, 512)).tolist() == [[256.0, 256.0], [50.0, 15.0]]
    assert rescale_to_eval_frame(points, (256, 256)).tolist() == points.tolist()
    assert rescale_to_eval_frame(np.array([10.0, 10.0]), (128, 512)).tolist() == [20.0, 5.0]


def test_native_sizes_rescale_before_measuring():
    query = _query((0.0, 0.0), video_id="big")
    report = compute_metrics([query], [_prediction((6.0, 8.0))], native_sizes={"big": (512, 512)})

    assert report.average_distance == pytest.approx(5.0)


@pytest.mark.parametrize("miss, occluded", [(5.99, False), (6.01, True)])
def test_cycle_consistency_threshold_is_strict(miss, occluded):
    forward = lambda p: PixelLocation(p.row + 3.0, p.col)
    backward = lambda p: PixelLocation(p.row - 3.0 + miss, p.col)

    assert cycle_consistency_occlusion(forward, backward, PixelLocation(10.0, 10.0), (256, 256)) is occluded


def test_cycle_consistency_measures_at_eval_resolution():
    forward = lambda p: p
    backward = lambda p: PixelLocation(p.row + 4.0, p.col)

    # 4 px on a 128 canvas is 8 px at 256
    assert cycle_consistency_occlusion(forward, backward, PixelLocation(10.0, 10.0), canvas=(128, 128))
    assert not cycle_consistency_occlusion(forward, backward, PixelLocation(10.0, 10.0), canvas=(512, 512))


def test_cycle_consistency_leaving_the_canvas_is_occluded():
    forward = lambda p: PixelLocation(p.row, p.col + 40.0)
    backward = lambda p: PixelLocation(p.row, p.col - 40.0)

    assert cycle_consistency_occlusion(forward, backward, PixelLocation(5.0, 5.0), canvas=(32, 32))


def test_cycle_consistency_needs_the_native_canvas():
    with pytest.raises(TypeError):
        cycle_consistency_occlusion(lambda p: p, lambda p: p, PixelLocation(1.0, 1.0))


def test_metrics_by_frame_gap_groups_queries():
    queries = [
        _query((0.0, 0.0), point_id=0, query_frame=0, target_frame=1),
        _query((0.0, 0.0), point_id=1, query_frame=0, target_frame=3),
        _query((0.0, 0.0), point_id=2, query_frame=1, target_frame=4),
    ]
    predictions = [_prediction((1.0, 0.0)), _prediction((2.0, 0.0)), _prediction((4.0, 0.0))]

    table = metrics_by_frame_gap(queries, predictions)

    assert table["frame_gap"].tolist() == [1, 3]
    assert table["num_queries"].tolist() == [1, 2]
    assert table["AD"].tolist() == pytest.approx([1.0, 3.0])


def test_precision_vs_threshold_is_monotone():
    rng = np.random.default_rng(1)
    queries = [_query((0.0, 0.0), point_id=i) for i in range(50)]
    predictions = [_prediction(tuple(rng.normal(0, 5, 2))) for _ in range(50)]

    table = precision_vs_threshold(queries, predictions, [1, 2, 4, 8, 16, 32])

    assert table["fraction"].is_monotonic_increasing
    assert table["threshold"].tolist() == [1.0, 2.0, 4.0, 8.0, 16.0, 32.0]
