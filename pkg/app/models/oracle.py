"""
Oracle-warp stub predictor.

Forward-warps its first-frame input by a known motion field instead of
learning anything, so probe logic can be checked against exact truth.
"""

from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from app.schemas.corpus import DenseMotionTruth, Frame
from app.schemas.patchwork import MaskedInput, PatchGrid
from app.utils.patches import patchify_images


class OracleWarpPredictor(nn.Module):
    """
    Moves every non-occluded frame-1 pixel by its rounded flow onto a base
    image. The base is the true second frame when given (so destinations
    covered by an occluder show the occluder), otherwise a constant fill.
    Linear in its input, hence differentiable.
    """

    def __init__(
        self,
        warp: DenseMotionTruth,
        patch_size: int,
        background: Optional[Frame] = None,
        fill: float = 0.0,
        token_dim: int = 32,
        seed: int = 0,
    ):
        super().__init__()
        H, W = warp.flow.shape[:2]
        self.grid = PatchGrid.for_size(H, W, patch_size)
        self.token_dim = token_dim
        self.frozen = True

        rows, cols = np.indices((H, W))
        dest_r = np.rint(rows + warp.flow[..., 0]).astype(np.int64)
        dest_c = np.rint(cols + warp.flow[..., 1]).astype(np.int64)
        inside = (dest_r >= 0) & (dest_r < H) & (dest_c >= 0) & (dest_c < W)
        carried = inside & ~warp.occluded_next
        src = (rows * W + cols)[carried]
        dst = (dest_r * W + dest_c)[carried]
        self.register_buffer("src_index", torch.from_numpy(src))
        self.register_buffer("dst_index", torch.from_numpy(dst))

        if background is not None:
            base = background.to_chw()[0]
        else:
            base = torch.full((3, H, W), float(fill))
        self.register_buffer("base", base.reshape(3, H * W).clone())

        generator = torch.Generator().manual_seed(seed)
        projection = torch.randn(self.grid.patch_dim, token_dim, generator=generator) / np.sqrt(self.grid.patch_dim)
        self.register_buffer("projection", projection)

    def forward(self, first: torch.Tensor, masked: MaskedInput) -> torch.Tensor:
        B, C, H, W = first.shape
        flat = first.reshape(B, C, H * W)
        out = self.base.to(first.dtype).expand(B, C, H * W).clone()
        out[:, :, self.dst_index] = flat[:, :, self.src_index]
        return out.reshape(B, C, H, W)

    def encode(self, first: torch.Tensor, masked: MaskedInput) -> torch.Tensor:
        projection = self.projection.to(first.dtype)
        t1 = patchify_images(first, self.grid.patch_size) @ projection
        t2 = masked.second_patches.to(first.dtype) @ projection
        return torch.cat([t1, t2], dim=1)

    def forward_with_tokens(self, first: torch.Tensor, masked: MaskedInput) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.forward(first, masked), self.encode(first, masked)


def translation_warp(height: int, width: int, drow: int, dcol: int) -> DenseMotionTruth:
    """Whole-canvas translation; pixels pushed off the canvas are occluded."""
    flow = np.zeros((height, width, 2), dtype=np.float32)
    flow[..., 0] = drow
    flow[..., 1] = dcol
    rows, cols = np.indices((height, width))
    leaves = (rows + drow < 0) | (rows + drow >= height) | (cols + dcol < 0) | (cols + dcol >= width)
    return DenseMotionTruth(flow=flow, occluded_next=leaves, owner=np.zeros((height, width), dtype=np.int64))
