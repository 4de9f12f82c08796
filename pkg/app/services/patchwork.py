"""
Pixel/patch index algebra and the masking policies.
"""

import numpy as np
import torch

from app.core.logging_config import logger
from app.core.seeding import round_half_up
from app.schemas.corpus import Frame, FramePair
from app.schemas.patchwork import MaskedInput, MaskPolicy, MaskSpec, PatchGrid
from app.utils.patches import patchify_images, unpatchify_images


def patchify(frame: Frame, grid: PatchGrid) -> torch.Tensor:
    """Frame -> [P, patch_dim] patch sequence in row-major order."""
    if frame.size != (grid.height, grid.width):
        raise ValueError(f"Frame {frame.size} does not match grid {grid.height}x{grid.width}")
    return patchify_images(frame.to_chw(), grid.patch_size)[0]


def unpatchify(patches: torch.Tensor, grid: PatchGrid) -> Frame:
    image = unpatchify_images(patches.unsqueeze(0), grid.patch_size, grid.rows, grid.cols)
    return Frame(image[0].permute(1, 2, 0).contiguous())


def sample_asymmetric_mask(grid: PatchGrid, alpha_reveal: float, seed: int) -> MaskSpec:
    """
    Frame 1 fully visible, round(alpha_reveal * P) frame-2 patches visible.

    The visible set is drawn uniformly without replacement. A ratio that
    rounds to zero patches is raised to one, with a warning.
    """
    if not 0 < alpha_reveal <= 1:
        raise ValueError(f"alpha_reveal must be in (0, 1], got {alpha_reveal}")
    P = grid.num_patches
    count = round_half_up(alpha_reveal * P)
    if count == 0:
        logger.warning(f"alpha_reveal={alpha_reveal} reveals no patch of {P}; revealing 1")
        count = 1
    rng = np.random.default_rng(seed)
    visible_f2 = np.zeros(P, dtype=bool)
    visible_f2[rng.choice(P, size=count, replace=False)] = True
    return MaskSpec(np.ones(P, dtype=bool), visible_f2, count / P, "asymmetric")


def _visible_set(P: int, mask_fraction: float, rng: np.random.Generator) -> np.ndarray:
    if not 0 <= mask_fraction < 1:
        raise ValueError(f"Mask fraction must be in [0, 1), got {mask_fraction}")
    masked = round_half_up(mask_fraction * P)
    visible = np.ones(P, dtype=bool)
    visible[rng.choice(P, size=masked, replace=False)] = False
    return visible


def sample_tube_mask(grid: PatchGrid, mask_fraction: float, seed: int) -> MaskSpec:
    """Same spatial patches masked in both frames."""
    rng = np.random.default_rng(seed)
    visible = _visible_set(grid.num_patches, mask_fraction, rng)
    return MaskSpec(visible, visible.copy(), visible.sum() / grid.num_patches, "tube")


def sample_random_mask(grid: PatchGrid, frac_f1: float, frac_f2: float, seed: int) -> MaskSpec:
    """Independent masks per frame."""
    rng = np.random.default_rng(seed)
    visible_f1 = _visible_set(grid.num_patches, frac_f1, rng)
    visible_f2 = _visible_set(grid.num_patches, frac_f2, rng)
    return MaskSpec(visible_f1, visible_f2, visible_f2.sum() / grid.num_patches, "random")


def sample_mask(
    grid: PatchGrid,
    policy: MaskPolicy,
    seed: int,
    alpha_reveal: float = 0.1,
    frac_f1: float = 0.75,
    frac_f2: float = 0.75,
) -> MaskSpec:
    """Dispatch on policy name; tube uses frac_f1 for both frames."""
    if policy == "asymmetric":
        return sample_asymmetric_mask(grid, alpha_reveal, seed)
    if policy == "tube":
        return sample_tube_mask(grid, frac_f1, seed)
    if policy == "random":
        return sample_random_mask(grid, frac_f1, frac_f2, seed)
    raise ValueError(f"Unknown mask policy: {policy}")


def apply_mask(pair: FramePair, mask: MaskSpec, grid: PatchGrid) -> MaskedInput:
    """
    Build the masked predictor input for one pair.

    Masked frame-2 rows are zeroed; the predictor substitutes its learnable
    mask token at those positions, so no masked frame-2 pixel reaches it.
    """
    if mask.num_patches != grid.num_patches:
        raise ValueError(f"Mask covers {mask.num_patches} patches, grid has {grid.num_patches}")
    patches = patchify(pair.second, grid)
    visible_f2 = torch.from_numpy(mask.visible_f2)
    second = torch.where(visible_f2[:, None], patches, torch.zeros_like(patches))
    return MaskedInput(
        second_patches=second.unsqueeze(0),
        visible_f1=torch.from_numpy(mask.visible_f1).unsqueeze(0),
        visible_f2=visible_f2.unsqueeze(0),
        grid=grid,
    )


def apply_mask_batch(second: torch.Tensor, masks, grid: PatchGrid) -> MaskedInput:
    """Batched apply_mask for training: second [B, 3, H, W], one MaskSpec per entry."""
    patches = patchify_images(second, grid.patch_size)
    visible_f1 = torch.from_numpy(np.stack([m.visible_f1 for m in masks])).to(second.device)
    visible_f2 = torch.from_numpy(np.stack([m.visible_f2 for m in masks])).to(second.device)
    patches = torch.where(visible_f2[..., None], patches, torch.zeros_like(patches))
    return MaskedInput(patches, visible_f1, visible_f2, grid)
