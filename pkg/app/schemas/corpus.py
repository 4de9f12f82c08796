"""
Core data types: frames, frame pairs, sprite scene configuration and
ground-truth motion (dense truth and sparse point tracks).
"""

from dataclasses import dataclass, field
from typing import List, Literal, NamedTuple, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, Field, model_validator


class PixelLocation(NamedTuple):
    """A (row, col) location in pixel units; real-valued."""
    row: float
    col: float


@dataclass
class Frame:
    """An RGB image with values in [0, 1], stored as a float tensor [H, W, 3]."""

    pixels: torch.Tensor

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[-1] != 3:
            raise ValueError(f"Frame pixels must have shape [H, W, 3], got {tuple(self.pixels.shape)}")
        if not torch.isfinite(self.pixels).all():
            raise ValueError("Frame pixels must be finite")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValueError("Frame pixels must lie in [0, 1]")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def size(self) -> Tuple[int, int]:
        return self.height, self.width

    def to_chw(self) -> torch.Tensor:
        """Batched channel-first view [1, 3, H, W] for the predictors."""
        return self.pixels.permute(2, 0, 1).unsqueeze(0)

    @classmethod
    def from_chw(cls, image: torch.Tensor) -> "Frame":
        """Build a frame from a [3, H, W] or [1, 3, H, W] tensor, clamping to [0, 1]."""
        if image.ndim == 4:
            image = image[0]
        return cls(image.detach().clamp(0, 1).permute(1, 2, 0).contiguous())

    @classmethod
    def from_uint8(cls, array: np.ndarray) -> "Frame":
        return cls(torch.from_numpy(array.astype(np.float32) / 255.0))

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.rint(self.pixels.numpy() * 255.0), 0, 255).astype(np.uint8)


@dataclass
class FramePair:
    """Two frames of one video, `gap_frames` apart."""

    first: Frame
    second: Frame
    gap_ms: float = 0.0
    gap_frames: int = 1

    def __post_init__(self):
        if self.first.size != self.second.size:
            raise ValueError(f"Frame sizes differ: {self.first.size} vs {self.second.size}")
        if self.gap_ms < 0:
            raise ValueError("gap_ms must be >= 0")
        if self.gap_frames < 1:
            raise ValueError("gap_frames must be >= 1")

    @property
    def size(self) -> Tuple[int, int]:
        return self.first.size


SpriteShape = Literal["rect", "disk", "texture"]
BackgroundMode = Literal["solid", "noise", "texture"]


class SpriteSceneConfig(BaseModel):
    """Procedural moving-sprites scene description. Pure function of its fields."""

    height: int = Field(32, ge=4, description="Canvas height in pixels")
    width: int = Field(32, ge=4, description="Canvas width in pixels")
    patch_size: int = Field(4, ge=1, description="Patch size the canvas must be divisible by")
    num_sprites: int = Field(2, ge=1, description="Number of moving sprites")
    shapes: List[SpriteShape] = Field(
        default_factory=lambda: ["rect", "disk", "texture"],
        min_length=1,
        description="Shapes sampled for each sprite"
    )
    sprite_size: Tuple[int, int] = Field((6, 12), description="Inclusive range of sprite side length (px)")
    max_velocity: int = Field(3, ge=0, description="Per-axis velocity bound in px/frame (integer motion)")
    subpixel: bool = Field(False, description="Sample real-valued velocities; truth becomes approximate")
    depth_order: Optional[List[int]] = Field(
        None, description="Permutation of sprite indices, far to near; random when omitted"
    )
    background: BackgroundMode = Field("texture", description="Background appearance")
    background_drift: Tuple[int, int] = Field((0, 0), description="Global background motion (px/frame)")
    occluder: bool = Field(False, description="Add a static occluding bar nearest to the camera")
    color_range: Tuple[float, float] = Field((0.1, 0.9), description="Range of sprite colors per channel")
    gap_frames: Tuple[int, int] = Field((1, 1), description="Inclusive range of sampled frame gaps for pairs")
    frame_interval_ms: float = Field(150.0, gt=0, description="Milliseconds between consecutive frames")
    seed: int = Field(0, description="RNG seed")

    @model_validator(mode="after")
    def _validate(self) -> "SpriteSceneConfig":
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError(
                f"Canvas {self.height}x{self.width} is not divisible by patch size {self.patch_size}"
            )
        lo, hi = self.sprite_size
        if lo < 1 or hi < lo:
            raise ValueError(f"Invalid sprite_size range {self.sprite_size}")
        if hi > min(self.height, self.width):
            raise ValueError(
                f"Sprite size {hi} is larger than the canvas {self.height}x{self.width}"
            )
        bound = min(self.height, self.width) / 2
        if self.max_velocity * self.gap_frames[1] > bound:
            raise ValueError(f"Velocity bound {self.max_velocity} exceeds min(H, W)/2 per step")
        if max(abs(d) for d in self.background_drift) > bound:
            raise ValueError("Background drift exceeds min(H, W)/2 per step")
        if self.depth_order is not None and sorted(self.depth_order) != list(range(self.num_sprites)):
            raise ValueError(f"depth_order {self.depth_order} is not a permutation of {self.num_sprites} sprites")
        if self.gap_frames[0] < 1 or self.gap_frames[1] < self.gap_frames[0]:
            raise ValueError(f"Invalid gap_frames range {self.gap_frames}")
        c_lo, c_hi = self.color_range
        if not 0 <= c_lo <= c_hi <= 1:
            raise ValueError(f"Invalid color_range {self.color_range}")
        return self


@dataclass
class DenseMotionTruth:
    """
    Exact forward motion from frame 1 to frame 2.

    `flow[r, c]` is the (drow, dcol) displacement of the frame-1 pixel at (r, c).
    `occluded_next` marks pixels whose destination is covered by a nearer
    layer or leaves the canvas. `owner` holds the layer id visible at each
    frame-1 pixel (-1 for background).
    """

    flow: np.ndarray
    occluded_next: np.ndarray
    owner: np.ndarray
    approximate: bool = False
    tolerance_px: float = 0.0

    def __post_init__(self):
        if self.flow.ndim != 3 or self.flow.shape[-1] != 2:
            raise ValueError("flow must have shape [H, W, 2]")
        if self.occluded_next.shape != self.flow.shape[:2]:
            raise ValueError("occluded_next must have shape [H, W]")
        if not np.isfinite(self.flow).all():
            raise ValueError("flow must be finite")

    @property
    def sprite_mask(self) -> np.ndarray:
        return self.owner >= 0


@dataclass
class TrackAnnotation:
    """
    Point tracks for one video.

    `locations` is [N, T, 2] in (row, col) pixel units, `visible` is [N, T].
    """

    locations: np.ndarray
    visible: np.ndarray
    height: int
    width: int
    point_ids: List[int] = field(default_factory=list)

    def __post_init__(self):
        self.visible = np.asarray(self.visible, dtype=bool)
        if self.visible.ndim != 2:
            raise ValueError(f"visible must have shape [N, T], got {self.visible.shape}")
        locations = np.asarray(self.locations, dtype=np.float64)
        if locations.shape != (*self.visible.shape, 2):
            raise ValueError(
                f"locations {locations.shape} and visible {self.visible.shape} disagree"
            )
        self.locations = locations
        shown = self.locations[self.visible]
        if shown.size and (
            (shown[:, 0] < 0).any() or (shown[:, 0] > self.height - 1).any()
            or (shown[:, 1] < 0).any() or (shown[:, 1] > self.width - 1).any()
        ):
            raise ValueError("Visible track locations must lie inside the canvas")
        if not self.point_ids:
            self.point_ids = list(range(self.num_points))

    @property
    def num_points(self) -> int:
        return int(self.visible.shape[0])

    @property
    def num_frames(self) -> int:
        return int(self.visible.shape[1])

    def location(self, point: int, frame: int) -> PixelLocation:
        row, col = self.locations[point, frame]
        return PixelLocation(float(row), float(col))
