import json
import pickle

import numpy as np
import pytest
from PIL import Image

from app.core.exceptions import DataError, TrackParseError
from app.schemas.corpus import SpriteSceneConfig, TrackAnnotation
from app.services.corpus import generate_sprite_video
from app.services.metrics import build_first_protocol
from app.services.track_dataset import TrackDataset, load_track_dataset, save_track_dataset


def _write_frames(directory, count, height=4, width=6):
    directory.mkdir(parents=True)
    for t in range(count):
        image = np.full((height, width, 3), 40 * t, dtype=np.uint8)
        Image.fromarray(image).save(directory / f"{t:05d}.png")


@pytest.fixture
def hand_written(tmp_path):
    _write_frames(tmp_path / "cat", 2)
    _write_frames(tmp_path / "dog", 3)
    document = {
        "videos": [
            {"frames_path": "cat", "points": [{"xy": [[1.0, 2.0], [2.0, 2.0]], "visible": [True, False]}]},
            {
                "frames_path": "dog",
                "points": [
                    {"xy": [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]], "visible": [False, True, True]},
                    {"xy": [[5.0, 3.0], [4.0, 3.0], [3.0, 3.0]], "visible": [True, True, True]},
                ],
            },
        ]
    }
    path = tmp_path / "tracks.json"
    path.write_text(json.dumps(document), encoding="utf-8")
    return path


def test_hand_written_file_matches_reference(hand_written):
    dataset = load_track_dataset(hand_written)

    assert dataset.video_ids == ["cat", "dog"]
    assert [len(v) for v in dataset.videos] == [2, 3]
    assert dataset.videos[1][2].pixels[0, 0, 0].item() == pytest.approx(80 / 255)
    cat, dog = dataset.annotations
    # xy is (col, row) on disk
    assert cat.locations[0].tolist() == [[2.0, 1.0], [2.0, 2.0]]
    assert cat.visible[0].tolist() == [True, False]
    assert dog.locations[1, 0].tolist() == [3.0, 5.0]
    assert (dog.height, dog.width) == (4, 6)


def test_round_trip_is_byte_identical(hand_written, tmp_path):
    dataset = load_track_dataset(hand_written)
    first = save_track_dataset(dataset, tmp_path / "copy" / "tracks.json")
    second = save_track_dataset(load_track_dataset(first), tmp_path / "copy2" / "tracks.json")

    assert first.read_bytes() == second.read_bytes()
    assert (tmp_path / "copy" / "dog" / "00002.png").read_bytes() == (tmp_path / "copy2" / "dog" / "00002.png").read_bytes()


def test_sprite_video_round_trip(tmp_path):
    frames, annotation, _ = generate_sprite_video(SpriteSceneConfig(height=16, width=16, sprite_size=(4, 6), seed=1), 3)
    dataset = TrackDataset([frames], [annotation], ["v0"])
    loaded = load_track_dataset(save_track_dataset(dataset, tmp_path / "tracks.json"))

    np.testing.assert_array_equal(loaded.annotations[0].locations, annotation.locations)
    np.testing.assert_array_equal(loaded.annotations[0].visible, annotation.visible)
    np.testing.assert_array_equal(loaded.videos[0][1].to_uint8(), frames[1].to_uint8())


def test_missing_field_names_the_field(hand_written):
    document = json.loads(hand_written.read_text())
    del document["videos"][1]["points"][0]["visible"]
    hand_written.write_text(json.dumps(document))

    with pytest.raises(TrackParseError) as excinfo:
        load_track_dataset(hand_written)

    assert excinfo.value.field == "videos[1].points[0].visible"
    assert excinfo.value.exit_code == 3


def test_wrong_trajectory_length_is_a_parse_error(hand_written):
    document = json.loads(hand_written.read_text())
    document["videos"][0]["points"][0]["xy"].append([0.0, 0.0])
    hand_written.write_text(json.dumps(document))

    with pytest.raises(TrackParseError, match="xy"):
        load_track_dataset(hand_written)


def test_visible_points_outside_canvas_are_clamped(hand_written, caplog):
    document = json.loads(hand_written.read_text())
    document["videos"][0]["points"][0]["xy"][0] = [9.0, -1.0]
    hand_written.write_text(json.dumps(document))

    dataset = load_track_dataset(hand_written)

    assert dataset.clamped_points == 1
    assert dataset.annotations[0].locations[0, 0].tolist() == [0.0, 5.0]
    assert "Clamped 1" in caplog.text


def test_missing_file_is_a_data_error(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_track_dataset(tmp_path / "absent.json")


def test_all_occluded_at_frame_zero_gives_no_frame_zero_queries():
    annotation = TrackAnnotation(
        locations=np.zeros((2, 3, 2)),
        visible=np.array([[False, True, True], [False, False, True]]),
        height=8,
        width=8,
    )
    queries = build_first_protocol(annotation, "v")

    assert all(q.query_frame != 0 for q in queries)
    assert [(q.query_frame, q.target_frame) for q in queries] == [(1, 2)]


def test_tapvid_pickle_layout(tmp_path):
    video = np.zeros((2, 4, 8, 3), dtype=np.uint8)
    points = np.array([[[0.5, 0.25], [0.25, 0.5]]])  # normalised (x, y)
    occluded = np.array([[False, True]])
    path = tmp_path / "davis.pkl"
    with open(path, "wb") as f:
        pickle.dump({"bear": {"video": video, "points": points, "occluded": occluded}}, f)

    dataset = load_track_dataset(path, "tapvid_pickle")

    assert dataset.video_ids == ["bear"]
    assert dataset.annotations[0].locations[0, 0].tolist() == [1.0, 4.0]
    assert dataset.annotations[0].visible[0].tolist() == [True, False]


def test_select_rejects_unknown_ids(hand_written):
    dataset = load_track_dataset(hand_written)

    assert dataset.select(["dog"]).video_ids == ["dog"]
    with pytest.raises(DataError, match="Unknown video ids"):
        dataset.select(["emu"])
