import pytest
import torch

from app.schemas.corpus import PixelLocation
from app.utils.geometry import CropTransform, scaled_crop_size


@pytest.mark.parametrize("out_size", [(16, 16), (12, 9), (32, 24)])
def test_crop_coordinates_round_trip(out_size):
    crop = CropTransform.centered(PixelLocation(10.3, 20.7), (12, 9), (32, 32), out_size)

    for point in (PixelLocation(10.3, 20.7), PixelLocation(4.0, 16.0), PixelLocation(15.5, 24.25)):
        back = crop.from_crop(crop.to_crop(point))
        assert back.row == pytest.approx(point.row)
        assert back.col == pytest.approx(point.col)


def test_unscaled_crop_only_shifts_pixels():
    crop = CropTransform.centered(PixelLocation(8.0, 8.0), (6, 6), (16, 16), (6, 6))
    images = torch.arange(16 * 16, dtype=torch.float32).reshape(1, 1, 16, 16)

    assert (crop.top, crop.left) == (5, 5)
    assert crop.to_crop(PixelLocation(7.0, 9.0)) == PixelLocation(2.0, 4.0)
    assert torch.equal(crop.apply(images), images[..., 5:11, 5:11])


def test_upsampled_crop_follows_the_pixel_centre_mapping():
    crop = CropTransform(top=4, left=2, crop_height=8, crop_width=8, out_height=16, out_width=16)
    rows = torch.arange(16, dtype=torch.float64)[:, None].expand(16, 16)
    images = torch.stack([rows, rows.T])[None]

    out = crop.apply(images)[0]

    # a bilinear resize reproduces a linear ramp away from the clamped border
    for j in range(1, 15):
        source = crop.from_crop(PixelLocation(float(j), float(j)))
        assert out[0, j, j].item() == pytest.approx(source.row)
        assert out[1, j, j].item() == pytest.approx(source.col)


def test_centered_crop_is_shifted_inside_the_canvas():
    assert CropTransform.centered(PixelLocation(0.0, 0.0), (12, 12), (32, 32), (16, 16)).top == 0
    corner = CropTransform.centered(PixelLocation(31.0, 31.0), (12, 12), (32, 32), (16, 16))

    assert (corner.top, corner.left) == (20, 20)


def test_crop_larger_than_canvas_is_rejected():
    with pytest.raises(ValueError, match="does not fit"):
        CropTransform.centered(PixelLocation(4.0, 4.0), (20, 8), (16, 16), (16, 16))


def test_scaled_crop_size_rounds_to_whole_pixels():
    assert scaled_crop_size((16, 16), 0.75, 0) == (16, 16)
    assert scaled_crop_size((16, 16), 0.75, 2) == (9, 9)
    assert scaled_crop_size((4, 4), 0.1, 3) == (1, 1)
