import pytest

from app.commands.common import generate_benchmark
from app.core.exceptions import ConfigError
from app.models.oracle import translation_warp
from app.models.rgb_predictor import build_rgb_predictor
from app.schemas.corpus import SpriteSceneConfig
from app.schemas.predictor import PredictorConfig
from app.schemas.probe import ProbeConfig
from app.schemas.run_config import AblationSection, CorpusSection, EvalSection
from app.services.ablation import ABLATION_COLUMNS, ablation_grid, run_ablation
from app.services.rgb_predictor import make_oracle_warp_predictor


def test_grid_is_the_cartesian_product_in_order():
    section = AblationSection(
        perturbations=["red_square", "green_square"], num_masks=[1, 3], num_scales=[0], resolutions=[None], alpha_reveals=[0.1]
    )

    cells = ablation_grid(section)

    assert [(c["perturbation"], c["num_masks"]) for c in cells] == [
        ("red_square", 1), ("red_square", 3), ("green_square", 1), ("green_square", 3),
    ]


def test_learned_cells_need_a_generator():
    model = build_rgb_predictor(PredictorConfig.micro(), seed=0).freeze()

    with pytest.raises(ConfigError, match="joint checkpoint"):
        run_ablation(model, None, AblationSection(perturbations=["learned"]), EvalSection(), ProbeConfig())


def test_resolution_change_needs_positional_tables():
    oracle = make_oracle_warp_predictor(translation_warp(8, 8, 0, 0))
    section = AblationSection(perturbations=["red_square"], num_masks=[1], num_scales=[0], resolutions=[16])

    with pytest.raises(ConfigError, match="resolution 16"):
        run_ablation(oracle, None, section, EvalSection(), ProbeConfig(perturbation="red_square"))


def test_one_row_per_cell():
    scene = SpriteSceneConfig(height=8, width=8, patch_size=4, num_sprites=1, sprite_size=(2, 4), max_velocity=1)
    dataset, _, _ = generate_benchmark(CorpusSection(scene=scene, num_videos=1, num_frames=2, points_per_sprite=2), 0)
    model = build_rgb_predictor(PredictorConfig.micro(), seed=0).freeze()
    section = AblationSection(
        perturbations=["red_square", "green_square"], num_masks=[1, 2], num_scales=[0], resolutions=[None], alpha_reveals=[0.1]
    )

    table = run_ablation(model, dataset, section, EvalSection(), ProbeConfig(perturbation="red_square", square_size=2))

    assert list(table.columns) == ABLATION_COLUMNS
    assert len(table) == 4
    assert table["resolution"].tolist() == [8] * 4
    assert table["masking_ratio"].tolist() == pytest.approx([0.9] * 4)
