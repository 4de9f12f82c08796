import math

import numpy as np
import pytest
import torch
from torch.func import functional_call

from app.models.oracle import translation_warp
from app.models.perturbation import PerturbationGenerator
from app.models.rgb_predictor import build_rgb_predictor
from app.schemas.corpus import Frame, FramePair, PixelLocation, SpriteSceneConfig
from app.schemas.patchwork import PatchGrid
from app.schemas.predictor import PredictorConfig
from app.schemas.probe import GaussianPerturbationParams, ProbeConfig
from app.services.corpus import generate_sprite_pair
from app.services.patchwork import apply_mask_batch, sample_asymmetric_mask
from app.services.probe import (
    FlowProbe,
    apply_fixed_square,
    compute_difference_image,
    export_perturbation_map,
    flow_probe_multimask,
    flow_probe_multiscale,
    flow_probe_single,
    probe_points,
    render_fields,
    render_perturbation,
    softargmax,
)
from app.services.rgb_predictor import make_oracle_warp_predictor
from tests.conftest import flat_frame, random_frame

RED = ProbeConfig(perturbation="red_square")


def _gaussian(amplitude, offset=(0.0, 0.0), sigma=1.0, dtype=torch.float32):
    return GaussianPerturbationParams(
        amplitude=torch.tensor([amplitude], dtype=dtype),
        offset=torch.tensor([offset], dtype=dtype),
        sigma=torch.tensor([sigma], dtype=dtype),
    )


def test_zero_amplitude_renders_nothing():
    field = render_perturbation(_gaussian([0.0, 0.0, 0.0]), PixelLocation(4.0, 4.0), 8, 8)

    assert field.shape == (8, 8, 3)
    assert torch.all(field == 0)


def test_gaussian_peak_and_falloff():
    field = render_perturbation(_gaussian([1.0, 0.0, 0.0]), PixelLocation(4.0, 4.0), 8, 8)

    assert field[4, 4, 0].item() == pytest.approx(1.0)
    assert field[4, 5, 0].item() == pytest.approx(math.exp(-0.5))
    assert field[5, 5, 0].item() == pytest.approx(math.exp(-1.0))
    assert torch.all(field[..., 1:] == 0)


def test_offset_moves_the_peak():
    field = render_perturbation(_gaussian([0.0, 0.5, 0.0], offset=(1.0, -2.0)), PixelLocation(4.0, 4.0), 8, 8)

    assert torch.argmax(field[..., 1]).item() == 5 * 8 + 2
    assert field[5, 2, 1].item() == pytest.approx(0.5)


def test_components_add_linearly():
    a = _gaussian([0.3, -0.2, 0.1], offset=(0.5, 1.0), sigma=1.5)
    b = _gaussian([-0.4, 0.6, 0.2], offset=(-1.0, 0.0), sigma=0.8)
    both = GaussianPerturbationParams(
        torch.cat([a.amplitude, b.amplitude]), torch.cat([a.offset, b.offset]), torch.cat([a.sigma, b.sigma])
    )
    p1 = PixelLocation(3.0, 5.0)

    combined = render_perturbation(both, p1, 8, 8)

    assert torch.allclose(combined, render_perturbation(a, p1, 8, 8) + render_perturbation(b, p1, 8, 8), atol=1e-6)


def test_render_rejects_points_outside_canvas():
    with pytest.raises(ValueError, match="outside"):
        render_perturbation(_gaussian([1.0, 0.0, 0.0]), PixelLocation(8.0, 0.0), 8, 8)


@pytest.mark.parametrize("size, rows, cols", [(1, (3, 4), (4, 5)), (2, (3, 5), (4, 6)), (3, (2, 5), (3, 6))])
def test_fixed_square_is_centred_on_the_query_pixel(size, rows, cols):
    images = torch.zeros(1, 3, 8, 8)

    out = apply_fixed_square(images, torch.tensor([[3.7, 4.2]]), (1.0, 0.0, 0.0), size)

    expected = torch.zeros(8, 8, dtype=torch.bool)
    expected[rows[0]:rows[1], cols[0]:cols[1]] = True
    assert torch.equal(out[0, 0] == 1.0, expected)
    assert torch.all(out[0, 1:] == 0)
    assert torch.all(images == 0)


def test_fixed_square_is_clipped_at_the_canvas_edge():
    out = apply_fixed_square(torch.zeros(1, 3, 4, 4), torch.tensor([[0.0, 3.0]]), (1.0, 0.0, 0.0), 3)

    assert out[0, 0].sum().item() == 4
    assert out[0, 0, :2, 2:].eq(1.0).all()


def test_identical_predictions_give_zero_difference():
    frame = random_frame(8, 8, seed=2)

    assert compute_difference_image(frame, frame).is_zero()


def test_difference_is_channel_l1():
    a = flat_frame(4, 4, 0.2)
    pixels = a.pixels.clone()
    pixels[1, 2, 1] = 0.5
    pixels[3, 0] = torch.tensor([0.0, 0.3, 0.4])

    diff = compute_difference_image(a, Frame(pixels))

    assert diff.values[1, 2].item() == pytest.approx(0.3)
    assert diff.values[3, 0].item() == pytest.approx(0.2 + 0.1 + 0.2)
    assert diff.values[0, 0].item() == 0
    assert diff.peak == pytest.approx(0.5)


def test_difference_rejects_size_mismatch():
    with pytest.raises(ValueError, match="sizes differ"):
        compute_difference_image(flat_frame(4, 4), flat_frame(8, 8))


def test_softargmax_of_one_hot_is_its_location():
    delta = torch.zeros(8, 8)
    delta[3, 5] = 1.0

    assert softargmax(delta, 1e-3).tolist() == pytest.approx([3.0, 5.0])


def test_softargmax_of_uniform_is_the_centroid():
    assert softargmax(torch.ones(4, 4), 0.7).tolist() == pytest.approx([1.5, 1.5])


def test_softargmax_weights_follow_the_temperature():
    tau = 0.2
    delta = torch.tensor([[0.0, tau * math.log(2.0)]], dtype=torch.float64)

    assert softargmax(delta, tau).tolist() == pytest.approx([0.0, 2 / 3])


def test_softargmax_closes_in_on_the_peak_as_tau_falls():
    delta = torch.zeros(8, 8, dtype=torch.float64)
    delta[2, 6] = 1.0
    peak = torch.tensor([2.0, 6.0], dtype=torch.float64)

    distances = [float((softargmax(delta, tau) - peak).norm()) for tau in (2.0, 1.0, 0.5, 0.2, 0.1, 0.01)]

    assert all(a >= b for a, b in zip(distances, distances[1:]))
    assert distances[-1] == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softargmax_needs_positive_temperature(tau):
    with pytest.raises(ValueError, match="tau"):
        softargmax(torch.ones(2, 2), tau)


def _mask(size=16, seed=0):
    return sample_asymmetric_mask(PatchGrid.for_size(size, size, 4), 0.1, seed)


@pytest.mark.parametrize("drow, dcol, p1", [(2, 3, (5.0, 5.0)), (-1, 4, (8.0, 2.0)), (0, -3, (0.0, 12.0))])
def test_oracle_translation_is_recovered_exactly(flat_pair, drow, dcol, p1):
    oracle = make_oracle_warp_predictor(translation_warp(16, 16, drow, dcol))

    prediction, diff = flow_probe_single(oracle, flat_pair, _mask(), PixelLocation(*p1), RED)

    assert prediction.flow == (drow, dcol)
    assert not prediction.occluded
    assert diff.peak == pytest.approx(1.5)


def test_identity_oracle_gives_zero_flow(flat_pair):
    oracle = make_oracle_warp_predictor(translation_warp(16, 16, 0, 0))

    prediction, _ = flow_probe_single(oracle, flat_pair, _mask(), PixelLocation(6.0, 9.0), RED)

    assert prediction.flow == (0.0, 0.0)
    assert prediction.occlusion_score == pytest.approx(1.5)


def test_point_leaving_the_canvas_is_occluded(flat_pair):
    oracle = make_oracle_warp_predictor(translation_warp(16, 16, 2, 0))

    prediction, diff = flow_probe_single(oracle, flat_pair, _mask(), PixelLocation(14.0, 5.0), RED)

    assert diff.is_zero()
    assert prediction.occluded
    assert prediction.degenerate
    assert prediction.flow == (0.0, 0.0)


def test_softargmax_mode_on_oracle_lands_inside_the_moved_square(flat_pair):
    oracle = make_oracle_warp_predictor(translation_warp(16, 16, 2, 3))
    config = RED.model_copy(update={"mode": "softargmax", "tau": 1e-3, "square_size": 1})

    prediction, _ = flow_probe_single(oracle, flat_pair, _mask(), PixelLocation(5.0, 5.0), config)

    assert prediction.p2_hat.row == pytest.approx(7.0, abs=1e-4)
    assert prediction.p2_hat.col == pytest.approx(8.0, abs=1e-4)


def test_point_behind_a_static_bar_is_occluded(flat_pair):
    warp = translation_warp(16, 16, 0, 3)
    # source columns 5-6 land under a bar at columns 8-9
    warp.occluded_next[:, 5:7] = True
    background = flat_frame(16, 16, 0.5).pixels.clone()
    background[:, 8:10] = torch.tensor([0.2, 0.3, 0.9])
    oracle = make_oracle_warp_predictor(warp, background=Frame(background))

    hidden = flow_probe_multimask(oracle, flat_pair, PixelLocation(4.0, 5.0), RED, num_masks=2)
    shown = flow_probe_multimask(oracle, flat_pair, PixelLocation(4.0, 2.0), RED, num_masks=2)

    assert hidden.occluded
    assert hidden.per_mask_max == pytest.approx([0.0, 0.0])
    assert not shown.occluded
    assert shown.flow == (0.0, 3.0)


def _sprite_scene(seed, **overrides):
    return SpriteSceneConfig(height=32, width=32, patch_size=4, num_sprites=3, seed=seed, **overrides)


def _pick(rng, mask, count=5):
    rows, cols = np.nonzero(mask)
    chosen = rng.choice(rows.size, size=min(count, rows.size), replace=False)
    return [PixelLocation(float(rows[k]), float(cols[k])) for k in chosen]


def test_red_square_recovers_translations_of_sprite_scenes():
    rng = np.random.default_rng(0)
    recovered = total = 0
    for seed in range(100):
        pair, truth = generate_sprite_pair(_sprite_scene(seed))
        drow, dcol = (int(v) for v in rng.integers(-3, 4, size=2))
        warp = translation_warp(32, 32, drow, dcol)
        points = _pick(rng, truth.sprite_mask & ~warp.occluded_next)
        if not points:
            continue

        for prediction in probe_points(make_oracle_warp_predictor(warp), pair, points, RED, pair_seed=seed):
            total += 1
            error = math.hypot(prediction.flow[0] - drow, prediction.flow[1] - dcol)
            recovered += (not prediction.occluded) and error <= 0.5

    assert total >= 400
    assert recovered / total >= 0.95


def test_occlusion_scores_separate_hidden_from_visible_sprite_points():
    rng = np.random.default_rng(1)
    scores = {True: [], False: []}
    correct = 0
    for seed in range(60):
        pair, truth = generate_sprite_pair(_sprite_scene(seed, occluder=True))
        oracle = make_oracle_warp_predictor(truth, background=pair.second)
        for hidden in (True, False):
            points = _pick(rng, truth.sprite_mask & (truth.occluded_next == hidden))
            if not points:
                continue
            for prediction in probe_points(oracle, pair, points, RED, pair_seed=seed):
                scores[hidden].append(prediction.occlusion_score)
                correct += prediction.occluded == hidden

    assert len(scores[True]) >= 30
    assert len(scores[False]) >= 250
    visible = np.array(scores[False])[:, None]
    occluded = np.array(scores[True])[None, :]
    auc = (visible > occluded).mean() + 0.5 * (visible == occluded).mean()
    assert auc >= 0.95
    assert correct / (len(scores[True]) + len(scores[False])) >= 0.9


def test_query_outside_canvas_is_rejected(flat_pair):
    oracle = make_oracle_warp_predictor(translation_warp(16, 16, 0, 0))

    with pytest.raises(ValueError, match="outside"):
        flow_probe_single(oracle, flat_pair, _mask(), PixelLocation(-1.0, 3.0), RED)


def test_learned_perturbation_needs_a_generator(flat_pair):
    oracle = make_oracle_warp_predictor(translation_warp(16, 16, 0, 0))

    with pytest.raises(ValueError, match="PerturbationGenerator"):
        FlowProbe(oracle, ProbeConfig(perturbation="learned"))


@pytest.fixture
def micro_pair():
    return FramePair(random_frame(8, 8, seed=11), random_frame(8, 8, seed=12))


@pytest.fixture
def micro_model():
    return build_rgb_predictor(PredictorConfig.micro(), seed=3).freeze()


def test_multimask_with_one_mask_equals_single_probe(micro_model, micro_pair):
    p1 = PixelLocation(2.0, 5.0)
    mask = FlowProbe(micro_model, RED).mask_for(pair_seed=4, scale=0, index=0)

    single, _ = flow_probe_single(micro_model, micro_pair, mask, p1, RED)
    multi = flow_probe_multimask(micro_model, micro_pair, p1, RED, num_masks=1, pair_seed=4)

    assert multi.p2_hat == single.p2_hat
    assert multi.occlusion_score == pytest.approx(single.occlusion_score)


def test_multimask_needs_at_least_one_mask(micro_model, micro_pair):
    with pytest.raises(ValueError, match="num_masks"):
        flow_probe_multimask(micro_model, micro_pair, PixelLocation(1.0, 1.0), RED, num_masks=0)


def test_multiscale_without_refinement_equals_multimask(micro_model, micro_pair):
    p1 = PixelLocation(6.0, 1.0)

    multi = flow_probe_multimask(micro_model, micro_pair, p1, RED, num_masks=3, pair_seed=1)
    scaled = flow_probe_multiscale(micro_model, micro_pair, p1, RED, num_iters=0, num_masks=3, pair_seed=1)

    assert scaled.p2_hat == multi.p2_hat
    assert scaled.per_mask_max == multi.per_mask_max
    assert scaled.num_scales == 0


def test_refinement_stops_below_two_patches(flat_pair):
    oracle = make_oracle_warp_predictor(translation_warp(16, 16, 0, 0))

    prediction = flow_probe_multiscale(oracle, flat_pair, PixelLocation(8.0, 8.0), RED, num_iters=5, crop_factor=0.75)

    # crops of 12 and 9 px fit two 4 px patches, 7 px does not
    assert prediction.num_scales == 2
    assert len(prediction.scale_trace) == 3


def test_probe_results_do_not_depend_on_point_order(flat_pair):
    oracle = make_oracle_warp_predictor(translation_warp(16, 16, 1, 2))
    points = [PixelLocation(1.0, 1.0), PixelLocation(15.0, 3.0), PixelLocation(4.0, 7.0)]
    config = RED.model_copy(update={"num_masks": 4})

    forward = probe_points(oracle, flat_pair, points, config, pair_seed=2)
    backward = probe_points(oracle, flat_pair, points[::-1], config, pair_seed=2)

    assert [p.to_row() for p in forward] == [p.to_row() for p in backward[::-1]]
    assert [p.flow for p in forward] == [(1.0, 2.0), (0.0, 0.0), (1.0, 2.0)]
    assert [p.occluded for p in forward] == [False, True, False]


def test_repeated_probes_are_identical(micro_model, micro_pair):
    config = RED.model_copy(update={"num_masks": 2, "num_scales": 1})
    points = [PixelLocation(3.0, 3.0)]

    first = probe_points(micro_model, micro_pair, points, config, pair_seed=7)
    second = probe_points(micro_model, micro_pair, points, config, pair_seed=7)

    assert first[0].to_row() == second[0].to_row()


def test_perturbation_map_covers_strided_grid(flat_pair):
    oracle = make_oracle_warp_predictor(translation_warp(16, 16, 1, 1))
    generator = PerturbationGenerator(oracle.token_dim, num_gaussians=2, hidden_dim=16, bounds=(1.0, 4.0, 0.5, 8.0))

    pmap = export_perturbation_map(generator, oracle, flat_pair, stride=5, config=ProbeConfig())

    assert pmap.shape == (4, 4)
    assert pmap.to_array().shape == (4, 4, 2, 6)
    assert (abs(pmap.amplitude) <= 1.0).all()
    assert ((pmap.sigma >= 0.5) & (pmap.sigma <= 8.0)).all()


def test_learned_probe_sends_gradients_to_the_generator(flat_pair):
    oracle = make_oracle_warp_predictor(translation_warp(16, 16, 1, 2))
    generator = PerturbationGenerator(oracle.token_dim, hidden_dim=16)
    probe = FlowProbe(oracle, ProbeConfig(mode="softargmax", tau=0.1), generator)
    points = torch.tensor([[5.0, 5.0], [9.0, 3.0]])

    flows = probe.estimate_flows(flat_pair.first.to_chw(), flat_pair.second.to_chw(), points, _mask())
    flows.sum().backward()

    assert flows.shape == (2, 2)
    assert all(p.grad is not None and torch.isfinite(p.grad).all() for p in generator.parameters())
    assert any(p.grad.abs().sum() > 0 for p in generator.parameters())


def test_gradients_through_render_oracle_and_softargmax_match_finite_differences():
    H = W = 8
    oracle = make_oracle_warp_predictor(translation_warp(H, W, 1, 1))
    first = torch.full((1, 3, H, W), 0.5, dtype=torch.float64)
    masked = apply_mask_batch(first, [_mask(size=8)], PatchGrid.for_size(H, W, 4))
    factual = oracle(first, masked)
    centers = torch.tensor([[3.0, 4.0]], dtype=torch.float64)

    def located(amplitude, offset, sigma):
        params = GaussianPerturbationParams(amplitude[None], offset[None], sigma[None])
        counterfactual = oracle(first + render_fields(params, centers, H, W), masked)
        return softargmax((counterfactual - factual).abs().sum(dim=1), tau=0.3)

    inputs = (
        torch.tensor([[0.3, 0.2, 0.25]], dtype=torch.float64, requires_grad=True),
        torch.tensor([[0.4, -0.3]], dtype=torch.float64, requires_grad=True),
        torch.tensor([1.2], dtype=torch.float64, requires_grad=True),
    )
    assert torch.autograd.gradcheck(located, inputs, eps=1e-6, atol=1e-5)


def test_gradients_through_the_micro_predictor_match_finite_differences(micro_pair):
    model = build_rgb_predictor(PredictorConfig.micro(), seed=5).double().freeze()
    first = micro_pair.first.to_chw().double()
    masked = apply_mask_batch(micro_pair.second.to_chw().double(), [_mask(size=8, seed=1)], model.grid)
    centers = torch.tensor([[4.0, 3.0]], dtype=torch.float64)

    def located(amplitude):
        params = GaussianPerturbationParams(amplitude[None], torch.zeros(1, 1, 2, dtype=torch.float64),
                                            torch.ones(1, 1, dtype=torch.float64))
        delta = model(first + render_fields(params, centers, 8, 8), masked) - model(first, masked)
        return softargmax(delta.pow(2).sum(dim=1), tau=0.05)

    amplitude = torch.tensor([[0.2, -0.1, 0.3]], dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(located, (amplitude,), eps=1e-6, atol=1e-5)


def test_multimask_average_does_not_depend_on_mask_order(micro_model, micro_pair):
    probe = FlowProbe(micro_model, RED)
    first, second = micro_pair.first.to_chw(), micro_pair.second.to_chw()
    points = torch.tensor([[2.0, 5.0], [6.0, 1.0]])
    draw = probe.mask_for

    forward_avg, forward_max = probe.multimask(first, second, points, pair_seed=5, num_masks=3)
    probe.mask_for = lambda pair_seed, scale, index, token=False: draw(pair_seed, scale, 2 - index, token)
    reverse_avg, reverse_max = probe.multimask(first, second, points, pair_seed=5, num_masks=3)

    assert torch.equal(forward_avg, reverse_avg)
    assert torch.equal(forward_max, reverse_max.flip(1))


def _map_spread(pmap):
    values = pmap.to_array()
    return float(values.reshape(-1, values.shape[-1]).var(axis=0).max())


def test_perturbation_map_follows_frame_content():
    oracle = make_oracle_warp_predictor(translation_warp(16, 16, 0, 0))
    torch.manual_seed(0)
    generator = PerturbationGenerator(oracle.token_dim, hidden_dim=16)
    flat = FramePair(flat_frame(16, 16, 0.5), flat_frame(16, 16, 0.5))
    textured = FramePair(random_frame(16, 16, seed=1), random_frame(16, 16, seed=2))

    flat_map = export_perturbation_map(generator, oracle, flat, stride=2, config=ProbeConfig())
    textured_map = export_perturbation_map(generator, oracle, textured, stride=2, config=ProbeConfig())

    assert _map_spread(flat_map) == pytest.approx(0.0, abs=1e-12)
    assert _map_spread(textured_map) > 1e-9


def test_generator_weight_gradients_match_finite_differences():
    H = W = 8
    oracle = make_oracle_warp_predictor(translation_warp(H, W, 1, 1))
    first = random_frame(H, W, seed=4).to_chw().double()
    masked = apply_mask_batch(first, [_mask(size=8)], PatchGrid.for_size(H, W, 4))
    factual = oracle(first, masked)
    centers = torch.tensor([[3.0, 4.0]], dtype=torch.float64)
    torch.manual_seed(0)
    generator = PerturbationGenerator(oracle.token_dim, hidden_dim=4, bounds=(0.4, 2.0, 0.5, 3.0)).double()
    token = oracle.encode(first, masked)[:, 1]
    names = [name for name, _ in generator.named_parameters()]

    def located(*weights):
        params = functional_call(generator, dict(zip(names, weights)), (token,))
        counterfactual = oracle(first + render_fields(params, centers, H, W), masked)
        return softargmax((counterfactual - factual).abs().sum(dim=1), tau=0.3)

    weights = tuple(p.detach().clone().requires_grad_(True) for p in generator.parameters())
    assert torch.autograd.gradcheck(located, weights, eps=1e-6, atol=1e-5)
