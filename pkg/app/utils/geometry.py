"""
Crop-and-resize transforms used by multiscale refinement.

Coordinates are pixel centres: a bilinear resize with align_corners=False
maps output pixel j to input coordinate (j + 0.5) / scale - 0.5, and the
transforms below use exactly that convention.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch
import torch.nn.functional as F

from app.schemas.corpus import PixelLocation


@dataclass(frozen=True)
class CropTransform:
    top: int
    left: int
    crop_height: int
    crop_width: int
    out_height: int
    out_width: int

    @property
    def scale(self) -> Tuple[float, float]:
        return self.out_height / self.crop_height, self.out_width / self.crop_width

    @classmethod
    def centered(
        cls,
        center: PixelLocation,
        crop_size: Tuple[int, int],
        canvas: Tuple[int, int],
        out_size: Tuple[int, int],
    ) -> "CropTransform":
        """Crop of `crop_size` centred on `center`, shifted to stay inside the canvas."""
        crop_h, crop_w = crop_size
        H, W = canvas
        if not (1 <= crop_h <= H and 1 <= crop_w <= W):
            raise ValueError(f"Crop {crop_size} does not fit canvas {canvas}")
        top = int(np.floor(center.row + 0.5 - crop_h / 2))
        left = int(np.floor(center.col + 0.5 - crop_w / 2))
        top = min(max(top, 0), H - crop_h)
        left = min(max(left, 0), W - crop_w)
        return cls(top, left, crop_h, crop_w, out_size[0], out_size[1])

    def to_crop(self, location: PixelLocation) -> PixelLocation:
        sr, sc = self.scale
        return PixelLocation(
            (location.row - self.top + 0.5) * sr - 0.5,
            (location.col - self.left + 0.5) * sc - 0.5,
        )

    def from_crop(self, location: PixelLocation) -> PixelLocation:
        sr, sc = self.scale
        return PixelLocation(
            (location.row + 0.5) / sr - 0.5 + self.top,
            (location.col + 0.5) / sc - 0.5 + self.left,
        )

    def apply(self, images: torch.Tensor) -> torch.Tensor:
        """Crop [B, C, H, W] images and resize them bilinearly to the output size."""
        crop = images[..., self.top:self.top + self.crop_height, self.left:self.left + self.crop_width]
        if (self.crop_height, self.crop_width) == (self.out_height, self.out_width):
            return crop
        return F.interpolate(crop, size=(self.out_height, self.out_width), mode="bilinear", align_corners=False)


def scaled_crop_size(canvas: Tuple[int, int], factor: float, iteration: int) -> Tuple[int, int]:
    """Side lengths factor**iteration of the canvas, rounded to whole pixels."""
    H, W = canvas
    ratio = factor ** iteration
    return max(1, int(round(H * ratio))), max(1, int(round(W * ratio)))
