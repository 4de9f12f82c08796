import pytest
import torch
import torch.nn as nn

from app.core.exceptions import DataError
from app.models.flow_predictor import build_flow_predictor
from app.models.rgb_predictor import build_rgb_predictor, parameter_hash
from app.schemas.corpus import PixelLocation, SpriteSceneConfig
from app.schemas.flow_predictor import FlowPredictorConfig, LayerSpec, SparseFlowConditioning
from app.schemas.patchwork import PatchGrid
from app.schemas.predictor import PredictorConfig, TrainSchedule
from app.schemas.probe import ProbeConfig
from app.schemas.run_config import JointSection
from app.services.checkpoint_storage import CheckpointStorage
from app.services.corpus import SpritePairDataset
from app.services.flow_predictor import (
    JointTrainer,
    build_perturbation_generator,
    encode_conditioning,
    load_joint_checkpoint,
    load_joint_models,
    predict_from_flow,
    shuffled_flow_gap,
)
from app.services.patchwork import patchify
from tests.conftest import random_frame

GRID = PatchGrid.for_size(8, 8, 4)


def test_single_point_conditions_its_patch():
    first = random_frame(8, 8, seed=0)

    cond = encode_conditioning([PixelLocation(1.0, 1.0)], [(2.0, 3.0)], first, GRID)

    assert cond.patch_indices.tolist() == [0]
    assert cond.flows.tolist() == [[2.0, 3.0]]
    assert torch.equal(cond.rgb_patches[0], patchify(first, GRID)[0])
    assert cond.density == 1
    assert cond.collisions == 0


def test_points_sharing_a_patch_keep_the_first(caplog):
    cond = encode_conditioning(
        [PixelLocation(1.0, 1.0), PixelLocation(2.0, 3.0)], [(1.0, 0.0), (5.0, 5.0)], random_frame(8, 8), GRID
    )

    assert cond.density == 1
    assert cond.collisions == 1
    assert cond.flows.tolist() == [[1.0, 0.0]]
    assert "share a patch" in caplog.text


def test_density_counts_distinct_patches():
    points = [PixelLocation(r, c) for r in (0.0, 4.0) for c in (0.0, 4.0)]

    cond = encode_conditioning(points, [(0.0, 0.0)] * 4, random_frame(8, 8), GRID)

    assert cond.density == 4
    assert sorted(cond.patch_indices.tolist()) == [0, 1, 2, 3]


def test_conditioning_flows_keep_their_gradient():
    flows = torch.tensor([[1.0, -1.0], [0.5, 0.5]], requires_grad=True)

    cond = encode_conditioning([PixelLocation(0.0, 0.0), PixelLocation(5.0, 6.0)], flows, random_frame(8, 8), GRID)
    dense_flow, _, present = cond.to_dense()
    dense_flow.sum().backward()

    assert present.tolist() == [True, False, False, True]
    assert flows.grad.tolist() == [[1.0, 1.0], [1.0, 1.0]]


def test_mismatched_points_and_flows_are_an_error():
    with pytest.raises(ValueError, match="flows"):
        encode_conditioning([PixelLocation(0.0, 0.0)], [(0.0, 0.0), (1.0, 1.0)], random_frame(8, 8), GRID)


def test_conditioning_rejects_non_finite_flows():
    with pytest.raises(ValueError, match="finite"):
        encode_conditioning([PixelLocation(0.0, 0.0)], [(float("nan"), 0.0)], random_frame(8, 8), GRID)


def test_prediction_from_flow_has_frame_shape():
    model = build_flow_predictor(FlowPredictorConfig.micro(), seed=0)
    first = random_frame(8, 8, seed=1)
    cond = encode_conditioning([PixelLocation(2.0, 2.0)], [(1.0, 1.0)], first, GRID)

    predicted = predict_from_flow(model, first, cond)

    assert predicted.size == (8, 8)
    assert model.training


def test_empty_conditioning_is_an_error():
    model = build_flow_predictor(FlowPredictorConfig.micro(), seed=0)
    empty = SparseFlowConditioning(
        torch.zeros(0, dtype=torch.long), torch.zeros(0, 2), torch.zeros(0, GRID.patch_dim), GRID
    )

    with pytest.raises(ValueError, match="empty"):
        predict_from_flow(model, random_frame(8, 8), empty)


def test_prediction_depends_on_the_flow():
    model = build_flow_predictor(FlowPredictorConfig.micro(), seed=0)
    first = random_frame(8, 8, seed=1)
    still = encode_conditioning([PixelLocation(2.0, 2.0)], [(0.0, 0.0)], first, GRID)
    moving = encode_conditioning([PixelLocation(2.0, 2.0)], [(3.0, -2.0)], first, GRID)

    assert not torch.equal(predict_from_flow(model, first, still).pixels, predict_from_flow(model, first, moving).pixels)


def test_shuffled_conditioning_permutes_flows_among_the_same_patches():
    points = [PixelLocation(r, c) for r in (0.0, 4.0) for c in (0.0, 4.0)]
    cond = encode_conditioning(points, [(1.0, 0.0), (2.0, 0.0), (3.0, 0.0), (4.0, 0.0)], random_frame(8, 8), GRID)

    shuffled = cond.shuffled(torch.Generator().manual_seed(1))
    again = cond.shuffled(torch.Generator().manual_seed(1))

    assert torch.equal(shuffled.patch_indices, cond.patch_indices)
    assert torch.equal(shuffled.rgb_patches, cond.rgb_patches)
    assert sorted(shuffled.flows[:, 0].tolist()) == [1.0, 2.0, 3.0, 4.0]
    assert torch.equal(shuffled.flows, again.flows)


def test_schedule_without_cross_attention_is_rejected():
    with pytest.raises(ValueError, match="conditioning would be ignored"):
        FlowPredictorConfig.micro(encoder_schedule=[LayerSpec.full().model_copy(update={"cross_2_to_1": False})],
                                  decoder_schedule=[LayerSpec.stream1()])


@pytest.fixture
def frozen_rgb():
    return build_rgb_predictor(PredictorConfig.micro(), seed=0).freeze()


@pytest.fixture
def sprites8():
    return SpriteSceneConfig(height=8, width=8, patch_size=4, num_sprites=1, sprite_size=(2, 4), max_velocity=1)


def _joint_section(**schedule):
    values = dict(
        base_lr=1e-3, warmup_epochs=0, total_epochs=1, steps_per_epoch=2,
        effective_batch=2, batch_size=2, checkpoint_every=2, log_every=1, min_val_improvement=1.0,
    )
    return JointSection(
        model=FlowPredictorConfig.micro(),
        schedule=TrainSchedule(**{**values, **schedule}),
        n_points=2,
        val_pairs=2,
    )


PROBE = ProbeConfig(generator_hidden=8)


def test_joint_trainer_needs_a_frozen_predictor(tmp_path, sprites8):
    model = build_rgb_predictor(PredictorConfig.micro(), seed=0)

    with pytest.raises(ValueError, match="frozen"):
        JointTrainer(model, SpritePairDataset(sprites8, 4, 0), _joint_section(), PROBE, CheckpointStorage(tmp_path, "joint"))


def test_joint_trainer_needs_matching_grids(tmp_path, sprites8, frozen_rgb):
    section = _joint_section().model_copy(update={"model": FlowPredictorConfig.micro(height=16, width=16)})

    with pytest.raises(ValueError, match="grid"):
        JointTrainer(frozen_rgb, SpritePairDataset(sprites8, 4, 0), section, PROBE, CheckpointStorage(tmp_path, "joint"))


def test_zero_learning_rate_leaves_all_parameters_unchanged(tmp_path, sprites8, frozen_rgb):
    rgb_before = parameter_hash(frozen_rgb)
    trainer = JointTrainer(
        frozen_rgb, SpritePairDataset(sprites8, 4, 0), _joint_section(base_lr=0.0), PROBE,
        CheckpointStorage(tmp_path, "joint"),
    )
    trainable_before = parameter_hash(trainer.trainable)

    result = trainer.train()

    assert trainer.state.step == 2
    assert result.param_hash == trainable_before
    assert parameter_hash(frozen_rgb) == rgb_before
    assert len(trainer.state.loss_history) == 2


def test_learned_flows_send_gradients_to_both_networks(tmp_path, sprites8, frozen_rgb):
    trainer = JointTrainer(
        frozen_rgb, SpritePairDataset(sprites8, 4, 0), _joint_section(), PROBE, CheckpointStorage(tmp_path, "joint")
    )
    items = [trainer.dataset[0], trainer.dataset[1]]

    loss, _ = trainer._batch_loss(items, [0, 1])
    loss.backward()

    for name in ("generator", "flow_model"):
        grads = [p.grad for p in trainer.trainable[name].parameters() if p.grad is not None]
        assert grads and any(g.abs().sum() > 0 for g in grads), name
    assert all(p.grad is None for p in frozen_rgb.parameters())


def test_frozen_generator_receives_no_update(tmp_path, sprites8, frozen_rgb):
    section = _joint_section().model_copy(update={"train_generator": False})
    trainer = JointTrainer(frozen_rgb, SpritePairDataset(sprites8, 4, 0), section, PROBE, CheckpointStorage(tmp_path, "joint"))
    before = parameter_hash(trainer.state.generator)

    trainer.train()

    assert parameter_hash(trainer.state.generator) == before


def test_changed_rgb_predictor_is_detected(tmp_path, sprites8, frozen_rgb):
    trainer = JointTrainer(
        frozen_rgb, SpritePairDataset(sprites8, 4, 0), _joint_section(), PROBE, CheckpointStorage(tmp_path, "joint")
    )
    with torch.no_grad():
        frozen_rgb.head.bias.add_(1.0)

    with pytest.raises(RuntimeError, match="changed"):
        trainer.verify_rgb_unchanged()


def test_joint_checkpoint_round_trip_and_hash_check(tmp_path, sprites8, frozen_rgb):
    trainer = JointTrainer(
        frozen_rgb, SpritePairDataset(sprites8, 4, 0), _joint_section(), PROBE, CheckpointStorage(tmp_path, "joint")
    )
    result = trainer.train()
    path = result.checkpoints[-1]

    payload = load_joint_checkpoint(path, parameter_hash(frozen_rgb))
    generator, flow_model, probe_config = load_joint_models(path, frozen_rgb)

    assert payload["token_dim"] == frozen_rgb.token_dim
    assert probe_config.is_learned
    assert parameter_hash(nn.ModuleDict({"generator": generator, "flow_model": flow_model})) == result.param_hash
    with pytest.raises(DataError, match="trained against"):
        load_joint_checkpoint(path, "0" * 64)


def test_generator_construction_is_seeded(frozen_rgb):
    a = build_perturbation_generator(frozen_rgb.token_dim, PROBE, 4, seed=3)
    b = build_perturbation_generator(frozen_rgb.token_dim, PROBE, 4, seed=3)

    assert parameter_hash(a) == parameter_hash(b)
    assert a(torch.zeros(1, frozen_rgb.token_dim)).sigma.shape == (1, 1)


def test_single_point_conditioning_shows_no_shuffled_flow_gap(sprites8):
    model = build_flow_predictor(FlowPredictorConfig.micro(), seed=0)

    true_mse, shuffled_mse = shuffled_flow_gap(model, SpritePairDataset(sprites8, 3, 0), n_points=1, seed=2)

    assert true_mse == shuffled_mse
    assert true_mse > 0


def test_shuffled_flow_gap_needs_exact_flow_truth(sprites8):
    model = build_flow_predictor(FlowPredictorConfig.micro(), seed=0)
    cropped = SpritePairDataset(sprites8, 2, 0, random_resized_crop=True)

    with pytest.raises(DataError, match="exact flow truth"):
        shuffled_flow_gap(model, cropped, n_points=2)


def _one_batch(dataset):
    items = [dataset[0], dataset[1]]
    return {key: torch.stack([item[key] for item in items]) for key in items[0]}


def test_rgb_weight_change_is_caught_after_one_step(tmp_path, sprites8, frozen_rgb):
    dataset = SpritePairDataset(sprites8, 4, 0)
    trainer = JointTrainer(frozen_rgb, dataset, _joint_section(), PROBE, CheckpointStorage(tmp_path, "joint"))
    with torch.no_grad():
        frozen_rgb.head.bias.add_(1e-3)

    with pytest.raises(RuntimeError, match="changed during joint training at step 1"):
        trainer.train_step([_one_batch(dataset)])


def test_trainable_rgb_parameter_is_caught_after_one_step(tmp_path, sprites8, frozen_rgb):
    dataset = SpritePairDataset(sprites8, 4, 0)
    trainer = JointTrainer(frozen_rgb, dataset, _joint_section(), PROBE, CheckpointStorage(tmp_path, "joint"))
    frozen_rgb.head.bias.requires_grad_(True)

    with pytest.raises(RuntimeError, match="became trainable"):
        trainer.train_step([_one_batch(dataset)])


def test_untouched_rgb_predictor_passes_the_step_check(tmp_path, sprites8, frozen_rgb):
    dataset = SpritePairDataset(sprites8, 4, 0)
    trainer = JointTrainer(frozen_rgb, dataset, _joint_section(), PROBE, CheckpointStorage(tmp_path, "joint"))

    trainer.train_step([_one_batch(dataset)])
    trainer.check_rgb_frozen()

    assert trainer.state.step == 1
