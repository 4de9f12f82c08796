"""
Loading and saving annotated point-track datasets.

portable_json is the canonical interchange format (read and write); the
TAP-Vid pickle layout is read-only.
"""

import json
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Tuple

import numpy as np
from PIL import Image
from pydantic import ValidationError

from app.core.exceptions import DataError, TrackParseError
from app.core.logging_config import logger
from app.schemas.corpus import Frame, TrackAnnotation
from app.schemas.track_dataset import PortablePoint, PortableTrackFile, PortableVideo

TrackFormat = Literal["portable_json", "tapvid_pickle"]

FRAME_NAME = "{:05d}.png"


@dataclass
class TrackDataset:
    """Videos (lists of frames) with one TrackAnnotation each."""

    videos: List[List[Frame]]
    annotations: List[TrackAnnotation]
    video_ids: List[str]
    clamped_points: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.videos) == len(self.annotations) == len(self.video_ids)):
            raise ValueError("videos, annotations and video_ids must have equal length")

    def __len__(self) -> int:
        return len(self.videos)

    def select(self, video_ids: List[str]) -> "TrackDataset":
        """Subset in the given order; unknown ids are a data error."""
        index = {vid: i for i, vid in enumerate(self.video_ids)}
        missing = [vid for vid in video_ids if vid not in index]
        if missing:
            raise DataError(f"Unknown video ids: {missing}")
        picks = [index[vid] for vid in video_ids]
        return TrackDataset(
            [self.videos[i] for i in picks],
            [self.annotations[i] for i in picks],
            list(video_ids),
            self.clamped_points,
        )


def _field_path(loc: Tuple) -> str:
    text = ""
    for part in loc:
        text += f"[{part}]" if isinstance(part, int) else (f".{part}" if text else str(part))
    return text


def _clamp(locations: np.ndarray, visible: np.ndarray, height: int, width: int) -> Tuple[np.ndarray, int]:
    """Clamp visible out-of-canvas locations; returns (locations, clamped count)."""
    limit = np.array([height - 1, width - 1], dtype=np.float64)
    outside = visible & ((locations < 0) | (locations > limit)).any(axis=-1)
    count = int(outside.sum())
    if count:
        locations = locations.copy()
        locations[outside] = np.clip(locations[outside], 0, limit)
    return locations, count


def _read_frames(directory: Path) -> List[Frame]:
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise DataError(f"No PNG frames in {directory}")
    return [Frame.from_uint8(np.asarray(Image.open(p).convert("RGB"))) for p in paths]


def _load_portable_json(path: Path) -> TrackDataset:
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise TrackParseError("<root>", f"invalid JSON ({e})", path) from e
    try:
        parsed = PortableTrackFile.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        raise TrackParseError(_field_path(first["loc"]), first["msg"], path) from e

    videos, annotations, video_ids = [], [], []
    clamped = 0
    for v, video in enumerate(parsed.videos):
        frames = _read_frames(path.parent / video.frames_path)
        T = len(frames)
        H, W = frames[0].size
        locations = np.zeros((len(video.points), T, 2))
        visible = np.zeros((len(video.points), T), dtype=bool)
        for p, point in enumerate(video.points):
            where = f"videos[{v}].points[{p}]"
            if len(point.xy) != T:
                raise TrackParseError(f"{where}.xy", f"has {len(point.xy)} entries for {T} frames", path)
            if len(point.visible) != T:
                raise TrackParseError(f"{where}.visible", f"has {len(point.visible)} entries for {T} frames", path)
            if any(len(xy) != 2 for xy in point.xy):
                raise TrackParseError(f"{where}.xy", "entries must be [col, row] pairs", path)
            xy = np.asarray(point.xy, dtype=np.float64)
            locations[p] = xy[:, ::-1]
            visible[p] = point.visible
        locations, count = _clamp(locations, visible, H, W)
        clamped += count
        videos.append(frames)
        annotations.append(TrackAnnotation(locations, visible, H, W))
        video_ids.append(Path(video.frames_path).name)

    if clamped:
        logger.warning(f"Clamped {clamped} visible track locations into the canvas ({path})")
    return TrackDataset(videos, annotations, video_ids, clamped)


def _load_tapvid_pickle(path: Path) -> TrackDataset:
    with open(path, "rb") as f:
        raw = pickle.load(f)
    items = list(raw.items()) if isinstance(raw, dict) else [(str(i), item) for i, item in enumerate(raw)]

    videos, annotations, video_ids = [], [], []
    clamped = 0
    for name, item in items:
        for key in ("video", "points", "occluded"):
            if key not in item:
                raise TrackParseError(f"{name}.{key}", "missing", path)
        video = np.asarray(item["video"])
        if video.ndim != 4 or video.shape[-1] != 3:
            raise TrackParseError(f"{name}.video", f"expected [T, H, W, 3], got {video.shape}", path)
        T, H, W, _ = video.shape
        points = np.asarray(item["points"], dtype=np.float64)
        occluded = np.asarray(item["occluded"], dtype=bool)
        if points.shape[1:] != (T, 2):
            raise TrackParseError(f"{name}.points", f"expected [N, {T}, 2], got {points.shape}", path)
        if occluded.shape != points.shape[:2]:
            raise TrackParseError(f"{name}.occluded", f"expected {points.shape[:2]}, got {occluded.shape}", path)
        # normalised (x, y) -> pixel (row, col)
        locations = np.stack([points[..., 1] * H, points[..., 0] * W], axis=-1)
        visible = ~occluded
        locations, count = _clamp(locations, visible, H, W)
        clamped += count
        frames = [Frame.from_uint8(video[t]) for t in range(T)]
        videos.append(frames)
        annotations.append(TrackAnnotation(locations, visible, H, W))
        video_ids.append(str(name))

    if clamped:
        logger.warning(f"Clamped {clamped} visible track locations into the canvas ({path})")
    return TrackDataset(videos, annotations, video_ids, clamped)


def load_track_dataset(path: Path, format: TrackFormat = "portable_json") -> TrackDataset:
    """
    Load an annotated track dataset.

    Args:
        path: JSON or pickle file
        format: "portable_json" or "tapvid_pickle"

    Returns:
        TrackDataset with (row, col) pixel locations at the stored resolution

    Raises:
        DataError: file missing or frames unreadable
        TrackParseError: a required field is missing or malformed
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"Track dataset not found: {path}")
    logger.info(f"Loading {format} track dataset from {path}")
    if format == "portable_json":
        return _load_portable_json(path)
    if format == "tapvid_pickle":
        return _load_tapvid_pickle(path)
    raise DataError(f"Unknown track dataset format: {format}")


def save_track_dataset(dataset: TrackDataset, path: Path) -> Path:
    """
    Write a dataset as portable_json; frames go to sibling directories named
    after the video ids.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    videos = []
    for video_id, frames, annotation in zip(dataset.video_ids, dataset.videos, dataset.annotations):
        frame_dir = path.parent / video_id
        frame_dir.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(frames):
            Image.fromarray(frame.to_uint8()).save(frame_dir / FRAME_NAME.format(t))
        points = [
            PortablePoint(
                xy=[[float(col), float(row)] for row, col in annotation.locations[p]],
                visible=[bool(v) for v in annotation.visible[p]],
            )
            for p in range(annotation.num_points)
        ]
        videos.append(PortableVideo(frames_path=video_id, points=points))
    path.write_text(PortableTrackFile(videos=videos).model_dump_json(indent=2), encoding="utf-8")
    return path
