import numpy as np
import pytest
import torch

from app.schemas.corpus import Frame, FramePair, SpriteSceneConfig


@pytest.fixture(autouse=True)
def cache_dir(tmp_path, monkeypatch):
    """Keep generated benchmarks out of the user's cache."""
    path = tmp_path / "cache"
    monkeypatch.setenv("CFPROBE_CACHE_DIR", str(path))
    return path


@pytest.fixture
def small_scene():
    return SpriteSceneConfig(
        height=16, width=16, patch_size=4, num_sprites=2, sprite_size=(4, 6), max_velocity=2, seed=7
    )


def flat_frame(height: int, width: int, value: float = 0.5) -> Frame:
    return Frame(torch.full((height, width, 3), value))


def random_frame(height: int, width: int, seed: int = 0) -> Frame:
    rng = np.random.default_rng(seed)
    return Frame(torch.from_numpy(rng.uniform(0, 1, size=(height, width, 3)).astype(np.float32)))


@pytest.fixture
def flat_pair():
    return FramePair(flat_frame(16, 16), flat_frame(16, 16))
