"""
Patch grid and masking types.
"""

from dataclasses import dataclass
from typing import Literal, Tuple

import numpy as np
import torch

MaskPolicy = Literal["asymmetric", "tube", "random"]


@dataclass(frozen=True)
class PatchGrid:
    """Square non-overlapping patches tiling an H x W canvas, indexed row-major."""

    patch_size: int
    rows: int
    cols: int

    @classmethod
    def for_size(cls, height: int, width: int, patch_size: int) -> "PatchGrid":
        if patch_size <= 0:
            raise ValueError(f"patch_size must be > 0, got {patch_size}")
        if height % patch_size or width % patch_size:
            raise ValueError(
                f"Canvas {height}x{width} is not divisible by patch size {patch_size}"
            )
        return cls(patch_size, height // patch_size, width // patch_size)

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols

    @property
    def height(self) -> int:
        return self.rows * self.patch_size

    @property
    def width(self) -> int:
        return self.cols * self.patch_size

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    def index(self, row: int, col: int) -> int:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise ValueError(f"Patch ({row}, {col}) outside {self.rows}x{self.cols} grid")
        return row * self.cols + col

    def coords(self, index: int) -> Tuple[int, int]:
        if not 0 <= index < self.num_patches:
            raise ValueError(f"Patch index {index} outside grid of {self.num_patches}")
        return divmod(index, self.cols)

    def patch_of_pixel(self, row: float, col: float) -> int:
        """Patch containing a pixel; boundaries resolve by floor(row/p), floor(col/p)."""
        if not (0 <= row < self.height and 0 <= col < self.width):
            raise ValueError(f"Pixel ({row}, {col}) outside {self.height}x{self.width} canvas")
        return self.index(int(row // self.patch_size), int(col // self.patch_size))


@dataclass
class MaskSpec:
    """Per-patch visibility for both frames of a pair."""

    visible_f1: np.ndarray
    visible_f2: np.ndarray
    alpha_reveal: float
    policy: MaskPolicy = "asymmetric"

    def __post_init__(self):
        self.visible_f1 = np.asarray(self.visible_f1, dtype=bool)
        self.visible_f2 = np.asarray(self.visible_f2, dtype=bool)
        if self.visible_f1.shape != self.visible_f2.shape or self.visible_f1.ndim != 1:
            raise ValueError("visible_f1 and visible_f2 must be 1-D and of equal length")

    @property
    def num_patches(self) -> int:
        return int(self.visible_f1.shape[0])

    @property
    def masked_f2(self) -> np.ndarray:
        return np.flatnonzero(~self.visible_f2)

    def to_bitset(self) -> str:
        """Compact hex dump: frame-1 bits then frame-2 bits."""
        bits = np.concatenate([self.visible_f1, self.visible_f2])
        return f"{self.num_patches}:{np.packbits(bits).tobytes().hex()}"

    @classmethod
    def from_bitset(cls, text: str, alpha_reveal: float, policy: MaskPolicy = "asymmetric") -> "MaskSpec":
        count, payload = text.split(":", 1)
        n = int(count)
        bits = np.unpackbits(np.frombuffer(bytes.fromhex(payload), dtype=np.uint8))[: 2 * n].astype(bool)
        return cls(bits[:n], bits[n:], alpha_reveal, policy)


@dataclass
class MaskedInput:
    """
    Masked predictor input for a batch of pairs.

    `second_patches` is [B, P, patch_dim] with masked rows zeroed; predictors
    replace those rows with their mask token, so the zeros are never read.
    `visible_f1` / `visible_f2` are bool tensors [B, P].
    """

    second_patches: torch.Tensor
    visible_f1: torch.Tensor
    visible_f2: torch.Tensor
    grid: PatchGrid

    @property
    def batch_size(self) -> int:
        return int(self.second_patches.shape[0])

    def repeat(self, times: int) -> "MaskedInput":
        """Repeat every batch entry `times` times (entry-major)."""
        return MaskedInput(
            self.second_patches.repeat_interleave(times, dim=0),
            self.visible_f1.repeat_interleave(times, dim=0),
            self.visible_f2.repeat_interleave(times, dim=0),
            self.grid,
        )

    def to(self, device: torch.device) -> "MaskedInput":
        return MaskedInput(
            self.second_patches.to(device),
            self.visible_f1.to(device),
            self.visible_f2.to(device),
            self.grid,
        )
