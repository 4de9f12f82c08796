from dataclasses import dataclass
from typing import Dict, Optional, Tuple

from pydantic import BaseModel, Field

from app.schemas.corpus import PixelLocation

DELTA_THRESHOLDS: Tuple[int, ...] = (1, 2, 4, 8, 16)
EVAL_RESOLUTION = 256


@dataclass(frozen=True)
class EvalQuery:
    """One (point, query frame, target frame) evaluation item."""

    video_id: str
    point_id: int
    query_frame: int
    query_location: PixelLocation
    target_frame: int
    gt_location: PixelLocation
    gt_visible: bool

    @property
    def frame_gap(self) -> int:
        return self.target_frame - self.query_frame

    @property
    def key(self) -> Tuple[str, int, int, int]:
        return self.video_id, self.point_id, self.query_frame, self.target_frame


@dataclass(frozen=True)
class PointPrediction:
    """Predicted target location (native pixel units) and occlusion flag."""

    location: PixelLocation
    occluded: bool


class MetricsReport(BaseModel):
    """
    TAP-Vid style evaluation result.

    Distance-based fields are None when no query has a visible ground truth;
    occlusion_f1 is None when it is undefined (no positives anywhere).
    """

    average_jaccard: Optional[float] = Field(None, description="AJ, mean Jaccard over thresholds")
    average_distance: Optional[float] = Field(None, description="AD in pixels at eval resolution")
    delta_avg: Optional[float] = Field(None, description="Mean fraction of visible points within thresholds")
    occlusion_accuracy: Optional[float] = Field(None, description="OA")
    occlusion_f1: Optional[float] = Field(None, description="OF1 with occluded as the positive class")
    delta_fractions: Dict[str, Optional[float]] = Field(default_factory=dict, description="Fraction within each threshold")
    jaccard_per_threshold: Dict[str, Optional[float]] = Field(default_factory=dict, description="Jaccard at each threshold")
    num_queries: int = Field(0, description="Number of evaluated queries")
    num_gt_visible: int = Field(0, description="Queries whose ground truth is visible")
    num_gt_occluded: int = Field(0, description="Queries whose ground truth is occluded")
    num_pred_occluded: int = Field(0, description="Queries predicted occluded")

    def table_row(self) -> Dict[str, Optional[float]]:
        return {
            "AJ": self.average_jaccard,
            "AD": self.average_distance,
            "<delta": self.delta_avg,
            "OA": self.occlusion_accuracy,
            "OF1": self.occlusion_f1,
        }
