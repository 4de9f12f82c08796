"""
Portable JSON layout of annotated track datasets.

Coordinates are stored as (col, row) pairs in pixels, the TAP-Vid
convention; they are converted to (row, col) when loaded.
"""

from typing import List

from pydantic import BaseModel, Field


class PortablePoint(BaseModel):
    xy: List[List[float]] = Field(..., description="Per-frame [col, row] in pixels")
    visible: List[bool] = Field(..., description="Per-frame visibility")


class PortableVideo(BaseModel):
    frames_path: str = Field(..., description="Directory of zero-padded PNG frames, relative to the JSON file")
    points: List[PortablePoint] = Field(..., description="Annotated trajectories")


class PortableTrackFile(BaseModel):
    videos: List[PortableVideo] = Field(..., description="Annotated videos")
