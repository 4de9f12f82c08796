import numpy as np
import pytest

from app.core.exceptions import DataError
from app.models.rgb_predictor import build_rgb_predictor
from app.schemas.corpus import SpriteSceneConfig
from app.schemas.predictor import PredictorConfig
from app.schemas.probe import ProbeConfig
from app.services.corpus import SpritePairDataset
from app.services.pseudo_labels import (
    LABEL_COLUMNS,
    export_pseudolabels,
    labels_per_pair,
    load_pseudolabels,
    pseudolabel_errors,
)


@pytest.mark.parametrize("height, width, fraction, expected", [
    (32, 32, 0.01, 10),
    (8, 8, 0.05, 3),
    (4, 4, 0.001, 1),
    (10, 10, 0.025, 3),
])
def test_labels_per_pair(height, width, fraction, expected):
    assert labels_per_pair(height, width, fraction) == expected


@pytest.fixture
def dataset():
    scene = SpriteSceneConfig(height=8, width=8, patch_size=4, num_sprites=1, sprite_size=(2, 4), max_velocity=1)
    return SpritePairDataset(scene, 3, seed=0)


def test_export_and_load(tmp_path, dataset):
    model = build_rgb_predictor(PredictorConfig.micro(), seed=0).freeze()
    config = ProbeConfig(perturbation="red_square", square_size=2)

    path = export_pseudolabels(model, dataset, config, 0.05, tmp_path, num_pairs=2, seed=1)
    labels = load_pseudolabels(path)

    assert np.load(path).shape == (6, len(LABEL_COLUMNS))
    assert sorted(labels) == [0, 1]
    assert all(label.num_labels == 3 for label in labels.values())
    assert labels[0].pair_seed == int(dataset[0]["seed"])
    assert (tmp_path / "labels.csv").exists()
    errors = pseudolabel_errors(labels, dataset)
    assert all(e >= 0 for e in errors)


def test_export_is_deterministic(tmp_path, dataset):
    model = build_rgb_predictor(PredictorConfig.micro(), seed=0).freeze()
    config = ProbeConfig(perturbation="red_square", square_size=2)

    a = export_pseudolabels(model, dataset, config, 0.05, tmp_path / "a", num_pairs=1, seed=1)
    b = export_pseudolabels(model, dataset, config, 0.05, tmp_path / "b", num_pairs=1, seed=1)

    assert np.array_equal(np.load(a), np.load(b))


def test_loading_a_malformed_file_is_a_data_error(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_pseudolabels(tmp_path / "labels.npy")

    np.save(tmp_path / "labels.npy", np.zeros((2, 3)))
    with pytest.raises(DataError, match="must be"):
        load_pseudolabels(tmp_path / "labels.npy")
