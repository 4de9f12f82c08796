import numpy as np
import pytest
import torch
from scipy import stats

from app.schemas.corpus import Frame, FramePair
from app.schemas.patchwork import MaskSpec, PatchGrid
from app.services.patchwork import (
    apply_mask,
    patchify,
    sample_asymmetric_mask,
    sample_random_mask,
    sample_tube_mask,
    unpatchify,
)
from tests.conftest import flat_frame, random_frame


def test_patchify_orders_patches_row_major():
    pixels = torch.zeros(8, 8, 3)
    pixels[:4, 4:] = 0.25
    pixels[4:, :4] = 0.5
    pixels[4:, 4:] = 0.75
    patches = patchify(Frame(pixels), PatchGrid.for_size(8, 8, 4))

    assert patches.shape == (4, 48)
    assert patches[:, 0].tolist() == [0.0, 0.25, 0.5, 0.75]


def test_constant_frame_gives_identical_patches():
    patches = patchify(flat_frame(8, 8, 0.3), PatchGrid.for_size(8, 8, 4))

    assert torch.equal(patches, patches[:1].expand_as(patches))


def test_unpatchify_inverts_patchify():
    frame = random_frame(16, 16, seed=3)
    grid = PatchGrid.for_size(16, 16, 4)

    assert torch.equal(unpatchify(patchify(frame, grid), grid).pixels, frame.pixels)


def test_grid_rejects_non_divisible_canvas():
    with pytest.raises(ValueError, match="not divisible"):
        PatchGrid.for_size(10, 8, 4)


def test_patch_of_boundary_pixel_uses_floor():
    grid = PatchGrid.for_size(16, 16, 4)

    assert grid.patch_of_pixel(3.999, 4.0) == grid.index(0, 1)
    assert grid.patch_of_pixel(4.0, 3.0) == grid.index(1, 0)
    assert grid.coords(grid.index(2, 3)) == (2, 3)


def test_full_reveal_shows_both_frames():
    mask = sample_asymmetric_mask(PatchGrid.for_size(16, 16, 4), 1.0, seed=0)

    assert mask.visible_f1.all()
    assert mask.visible_f2.all()


def test_reveal_count_is_exact():
    grid = PatchGrid.for_size(40, 40, 4)
    for seed in range(20):
        mask = sample_asymmetric_mask(grid, 0.1, seed)
        assert mask.visible_f1.all()
        assert mask.visible_f2.sum() == 10


def test_tiny_reveal_keeps_one_patch(caplog):
    mask = sample_asymmetric_mask(PatchGrid.for_size(8, 8, 4), 0.01, seed=0)

    assert mask.visible_f2.sum() == 1
    assert "revealing 1" in caplog.text


def test_reveal_sets_collide_at_the_hypergeometric_rate():
    # 10 visible of 20: two independent draws share k patches ~ Hypergeom(20, 10, 10)
    grid = PatchGrid.for_size(16, 20, 4)
    overlaps = np.array([
        (sample_asymmetric_mask(grid, 0.5, 2 * i).visible_f2 & sample_asymmetric_mask(grid, 0.5, 2 * i + 1).visible_f2).sum()
        for i in range(100)
    ])
    dist = stats.hypergeom(20, 10, 10)

    assert abs(overlaps.mean() - dist.mean()) <= 3 * dist.std() / np.sqrt(len(overlaps))


def test_tube_mask_masks_the_same_patches():
    grid = PatchGrid.for_size(40, 40, 4)
    mask = sample_tube_mask(grid, 0.55, seed=1)

    assert mask.visible_f1.sum() == 45
    assert np.array_equal(mask.visible_f1, mask.visible_f2)
    assert sample_tube_mask(grid, 0.0, seed=1).visible_f1.all()


def test_random_mask_draws_frames_independently():
    grid = PatchGrid.for_size(40, 40, 4)
    overlaps = []
    for seed in range(50):
        mask = sample_random_mask(grid, 0.75, 0.75, seed)
        assert mask.visible_f1.sum() == 25
        assert mask.visible_f2.sum() == 25
        overlaps.append((mask.visible_f1 & mask.visible_f2).sum())

    dist = stats.hypergeom(100, 25, 25)
    assert abs(np.mean(overlaps) - dist.mean()) <= 3 * dist.std() / np.sqrt(len(overlaps))


@pytest.mark.parametrize("fraction", [-0.1, 1.0])
def test_mask_fraction_outside_range_is_an_error(fraction):
    with pytest.raises(ValueError, match="Mask fraction"):
        sample_tube_mask(PatchGrid.for_size(8, 8, 4), fraction, seed=0)


def test_apply_mask_hides_exactly_the_masked_patches():
    grid = PatchGrid.for_size(16, 16, 4)
    pair = FramePair(random_frame(16, 16, 1), random_frame(16, 16, 2))
    mask = sample_asymmetric_mask(grid, 0.25, seed=5)
    masked = apply_mask(pair, mask, grid)

    patches = patchify(pair.second, grid)
    shown = masked.visible_f2[0]
    assert np.array_equal(np.flatnonzero(~shown.numpy()), mask.masked_f2)
    assert torch.equal(masked.second_patches[0][shown], patches[shown])
    assert torch.all(masked.second_patches[0][~shown] == 0)


def test_all_visible_mask_is_identity():
    grid = PatchGrid.for_size(16, 16, 4)
    pair = FramePair(random_frame(16, 16, 1), random_frame(16, 16, 2))
    masked = apply_mask(pair, sample_asymmetric_mask(grid, 1.0, seed=0), grid)

    assert torch.equal(masked.second_patches[0], patchify(pair.second, grid))


def test_mask_bitset_round_trip():
    mask = sample_random_mask(PatchGrid.for_size(16, 12, 4), 0.5, 0.25, seed=3)
    restored = MaskSpec.from_bitset(mask.to_bitset(), mask.alpha_reveal, "random")

    assert np.array_equal(restored.visible_f1, mask.visible_f1)
    assert np.array_equal(restored.visible_f2, mask.visible_f2)
