"""
Probe configuration and result types.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Tuple

import torch
from pydantic import BaseModel, Field, model_validator

from app.schemas.corpus import PixelLocation

PerturbationSource = Literal["learned", "fixed_square", "red_square", "green_square"]
LocateMode = Literal["argmax", "softargmax"]
TokenMaskMode = Literal["same", "independent"]

SQUARE_PRESETS: Dict[str, Tuple[float, float, float]] = {
    "red_square": (1.0, 0.0, 0.0),
    "green_square": (0.0, 1.0, 0.0),
}


class ProbeConfig(BaseModel):
    """Settings of the counterfactual flow/occlusion probe."""

    perturbation: PerturbationSource = Field("learned", description="Perturbation source")
    square_color: Tuple[float, float, float] = Field(
        (1.0, 0.0, 0.0), description="Colour painted by fixed_square"
    )
    square_size: int = Field(1, ge=1, description="Side of the fixed square in pixels, centred on p1")
    mode: LocateMode = Field("argmax", description="How p2 is read off the difference image")
    tau: float = Field(0.05, gt=0, description="Softargmax temperature")
    alpha_reveal: float = Field(0.1, gt=0, le=1, description="Fraction of frame-2 patches visible at probe time")
    num_masks: int = Field(1, ge=1, description="Independent mask draws averaged per estimate")
    num_scales: int = Field(0, ge=0, description="Zoom-in refinement iterations")
    crop_factor: float = Field(0.75, gt=0, lt=1, description="Crop side ratio per zoom iteration")
    occlusion_threshold: float = Field(0.05, ge=0, description="occluded iff mean per-mask max difference is below this")
    token_mask: TokenMaskMode = Field("same", description="Mask draw used for token extraction")
    num_gaussians: int = Field(1, ge=1, description="Colored Gaussians per perturbation")
    amplitude_max: float = Field(1.0, gt=0, description="Amplitude bound per channel")
    offset_max: Optional[float] = Field(None, gt=0, description="Centre offset bound in px (default: patch size)")
    sigma_min: float = Field(0.5, gt=0, description="Lower std bound in px")
    sigma_max: Optional[float] = Field(None, gt=0, description="Upper std bound in px (default: 2 * patch size)")
    generator_hidden: int = Field(256, ge=1, description="Hidden width of the perturbation MLP")
    seed: int = Field(0, description="Seed of the probe's mask draws")

    @model_validator(mode="after")
    def _validate(self) -> "ProbeConfig":
        if self.sigma_max is not None and self.sigma_max <= self.sigma_min:
            raise ValueError(f"sigma_max ({self.sigma_max}) must exceed sigma_min ({self.sigma_min})")
        if any(not 0 <= c <= 1 for c in self.square_color):
            raise ValueError(f"square_color {self.square_color} must lie in [0, 1]")
        return self

    @property
    def is_learned(self) -> bool:
        return self.perturbation == "learned"

    @property
    def resolved_square_color(self) -> Tuple[float, float, float]:
        return SQUARE_PRESETS.get(self.perturbation, self.square_color)

    def bounds(self, patch_size: int) -> Tuple[float, float, float, float]:
        """(a_max, r_max, sigma_min, sigma_max) with patch-relative defaults filled in."""
        r_max = self.offset_max if self.offset_max is not None else float(patch_size)
        sigma_max = self.sigma_max if self.sigma_max is not None else 2.0 * patch_size
        return self.amplitude_max, r_max, self.sigma_min, max(sigma_max, self.sigma_min + 1e-3)


@dataclass
class GaussianPerturbationParams:
    """
    Parameters of a sum of K colored isotropic Gaussians, relative to p1.

    amplitude: [..., K, 3]; offset: [..., K, 2] (drow, dcol) px; sigma: [..., K] px.
    Leading dimensions batch over query points.
    """

    amplitude: torch.Tensor
    offset: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        k = self.amplitude.shape[-2]
        if self.amplitude.shape[-1] != 3 or self.offset.shape[-2:] != (k, 2) or self.sigma.shape[-1] != k:
            raise ValueError(
                f"Inconsistent perturbation shapes: amplitude {tuple(self.amplitude.shape)}, "
                f"offset {tuple(self.offset.shape)}, sigma {tuple(self.sigma.shape)}"
            )

    @property
    def num_components(self) -> int:
        return int(self.amplitude.shape[-2])


@dataclass
class DifferenceImage:
    """Per-pixel L1 difference across colour channels, [H, W], non-negative."""

    values: torch.Tensor

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError(f"Difference image must be [H, W], got {tuple(self.values.shape)}")

    @property
    def size(self) -> Tuple[int, int]:
        return int(self.values.shape[0]), int(self.values.shape[1])

    @property
    def peak(self) -> float:
        return float(self.values.max())

    def is_zero(self) -> bool:
        return bool((self.values == 0).all())


@dataclass
class FlowPrediction:
    """One probed point: estimated destination, flow and occlusion decision."""

    p1: PixelLocation
    p2_hat: PixelLocation
    occlusion_score: float
    occluded: bool
    per_mask_max: List[float] = field(default_factory=list)
    scale_trace: List[PixelLocation] = field(default_factory=list)
    degenerate: bool = False
    num_masks: int = 1
    num_scales: int = 0
    video_id: str = ""
    point_id: int = 0
    query_frame: int = 0
    target_frame: int = 1

    @property
    def flow(self) -> Tuple[float, float]:
        return self.p2_hat.row - self.p1.row, self.p2_hat.col - self.p1.col

    def to_row(self) -> Dict[str, Any]:
        """Flat record for the prediction table."""
        flow = self.flow
        return {
            "video_id": self.video_id,
            "point_id": self.point_id,
            "query_frame": self.query_frame,
            "target_frame": self.target_frame,
            "p1_row": self.p1.row,
            "p1_col": self.p1.col,
            "p2_row": self.p2_hat.row,
            "p2_col": self.p2_hat.col,
            "flow_row": flow[0],
            "flow_col": flow[1],
            "occlusion_score": self.occlusion_score,
            "occluded": self.occluded,
            "degenerate": self.degenerate,
            "num_masks": self.num_masks,
            "num_scales": self.num_scales,
        }
