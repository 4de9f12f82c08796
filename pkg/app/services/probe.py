"""
Counterfactual flow and occlusion probes.

A probe predicts the second frame twice from the same masked input: once
from the clean first frame (factual) and once from a first frame carrying a
small perturbation at p1 (counterfactual). The perturbation travels with the
scene, so the peak of the per-pixel difference locates p1 in frame 2; a
flat difference means the point went out of view.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from app.core.logging_config import logger
from app.core.seeding import derive_seed
from app.models.perturbation import PerturbationGenerator
from app.models.rgb_predictor import NextFramePredictor
from app.schemas.corpus import Frame, FramePair, PixelLocation
from app.schemas.patchwork import MaskedInput, MaskSpec
from app.schemas.probe import DifferenceImage, FlowPrediction, GaussianPerturbationParams, ProbeConfig
from app.services.patchwork import apply_mask_batch, sample_asymmetric_mask
from app.utils.geometry import CropTransform, scaled_crop_size


# ---------------------------------------------------------
# Perturbations
# ---------------------------------------------------------

def render_fields(params: GaussianPerturbationParams, centers: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """
    Batched Gaussian sums: params with leading dim N, centers [N, 2] -> [N, 3, H, W].

    field[c, r, q] = sum_k a_k[c] * exp(-((r - r_k)^2 + (q - c_k)^2) / (2 sigma_k^2))
    with (r_k, c_k) = center + offset_k.
    """
    dtype = params.amplitude.dtype
    rows = torch.arange(height, dtype=dtype, device=centers.device).view(1, 1, height, 1)
    cols = torch.arange(width, dtype=dtype, device=centers.device).view(1, 1, 1, width)
    center_r = (centers[:, None, 0].to(dtype) + params.offset[..., 0])[..., None, None]
    center_c = (centers[:, None, 1].to(dtype) + params.offset[..., 1])[..., None, None]
    dist2 = (rows - center_r) ** 2 + (cols - center_c) ** 2
    gauss = torch.exp(-dist2 / (2 * params.sigma[..., None, None] ** 2))
    return torch.einsum("nkc,nkhw->nchw", params.amplitude, gauss)


def render_perturbation(
    params: GaussianPerturbationParams,
    p1: PixelLocation,
    height: int,
    width: int,
) -> torch.Tensor:
    """
    Additive perturbation field [H, W, 3] for one query point.

    Bounds are enforced upstream by squashing; nothing is clamped here.
    Clamping to [0, 1] happens only when the field is added to a frame.
    """
    if not (0 <= p1.row <= height - 1 and 0 <= p1.col <= width - 1):
        raise ValueError(f"p1 {tuple(p1)} outside {height}x{width} canvas")
    batched = GaussianPerturbationParams(params.amplitude[None], params.offset[None], params.sigma[None])
    centers = torch.tensor([[p1.row, p1.col]], dtype=params.amplitude.dtype)
    return render_fields(batched, centers, height, width)[0].permute(1, 2, 0)


def apply_fixed_square(
    images: torch.Tensor,
    points: torch.Tensor,
    color: Sequence[float],
    size: int,
) -> torch.Tensor:
    """
    Paint a solid square centred on the pixel containing p1 on each image.

    Odd sides are symmetric about that pixel; an even side extends one
    pixel further down and right.

    Args:
        images: [N, 3, H, W]
        points: [N, 2] (row, col)
        color: RGB in [0, 1]
        size: Square side in pixels (clipped at the canvas edge)
    """
    out = images.clone()
    _, _, H, W = images.shape
    fill = torch.tensor(color, dtype=images.dtype, device=images.device)[:, None, None]
    for n, (row, col) in enumerate(points.detach().cpu().numpy()):
        r0 = int(np.floor(row)) - (size - 1) // 2
        c0 = int(np.floor(col)) - (size - 1) // 2
        out[n, :, max(r0, 0):min(r0 + size, H), max(c0, 0):min(c0 + size, W)] = fill
    return out


# ---------------------------------------------------------
# Difference image and localisation
# ---------------------------------------------------------

def compute_difference_image(pred_factual: Frame, pred_counterfactual: Frame) -> DifferenceImage:
    """Per-pixel L1 norm across colour channels of the two predictions."""
    if pred_factual.size != pred_counterfactual.size:
        raise ValueError(f"Prediction sizes differ: {pred_factual.size} vs {pred_counterfactual.size}")
    return DifferenceImage((pred_counterfactual.pixels - pred_factual.pixels).abs().sum(dim=-1))


def _pixel_coords(height: int, width: int, like: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    rows = torch.arange(height, dtype=like.dtype, device=like.device).repeat_interleave(width)
    cols = torch.arange(width, dtype=like.dtype, device=like.device).repeat(height)
    return rows, cols


def softargmax(delta: torch.Tensor, tau: float) -> torch.Tensor:
    """
    Expected (row, col) under softmax(delta / tau) over the last two dims.

    Args:
        delta: [..., H, W]
        tau: Temperature > 0

    Returns:
        [..., 2], differentiable w.r.t. delta
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    H, W = delta.shape[-2:]
    logits = delta.flatten(-2) / tau
    logits = logits - logits.amax(dim=-1, keepdim=True)
    weights = torch.softmax(logits, dim=-1)
    rows, cols = _pixel_coords(H, W, weights)
    return torch.stack([(weights * rows).sum(-1), (weights * cols).sum(-1)], dim=-1)


def hard_argmax(delta: torch.Tensor) -> torch.Tensor:
    """(row, col) of the first maximum in row-major order, i.e. the lowest (row, col) on ties."""
    W = delta.shape[-1]
    flat = delta.flatten(-2).argmax(dim=-1)
    return torch.stack([flat // W, flat % W], dim=-1).to(delta.dtype)


def _sorted_mean(values: torch.Tensor, dim: int = 0) -> torch.Tensor:
    """Mean along `dim` with a fixed summation order, independent of input order."""
    return torch.sort(values, dim=dim).values.sum(dim=dim) / values.shape[dim]


# ---------------------------------------------------------
# Probe engine
# ---------------------------------------------------------

class FlowProbe:
    """
    Batched counterfactual probe on a predictor.

    Each call to `deltas` runs exactly two predictions: the factual one and
    the counterfactual one, sharing the same masked second frame. Token
    extraction and the factual pass never receive gradients; the
    counterfactual pass carries gradients back to the perturbation
    generator through the predictor's input.
    """

    def __init__(
        self,
        predictor: NextFramePredictor,
        config: ProbeConfig,
        generator: Optional[PerturbationGenerator] = None,
    ):
        if config.is_learned and generator is None:
            raise ValueError("A learned perturbation needs a PerturbationGenerator")
        self.predictor = predictor
        self.config = config
        self.generator = generator
        self.grid = predictor.grid
        predictor.eval()

    def mask_for(self, pair_seed: int, scale: int, index: int, token: bool = False) -> MaskSpec:
        parts = (self.config.seed, pair_seed, scale, index) + (("token",) if token else ())
        return sample_asymmetric_mask(self.grid, self.config.alpha_reveal, derive_seed(*parts))

    def mask_images(self, second: torch.Tensor, mask: MaskSpec) -> MaskedInput:
        return apply_mask_batch(second, [mask] * second.shape[0], self.grid)

    def _patch_index(self, points: torch.Tensor) -> torch.Tensor:
        p = self.grid.patch_size
        r = torch.clamp(torch.floor(points[:, 0] / p).long(), 0, self.grid.rows - 1)
        c = torch.clamp(torch.floor(points[:, 1] / p).long(), 0, self.grid.cols - 1)
        return r * self.grid.cols + c

    def perturb(
        self,
        first: torch.Tensor,
        points: torch.Tensor,
        tokens: Optional[torch.Tensor],
    ) -> Tuple[torch.Tensor, Optional[GaussianPerturbationParams]]:
        """Counterfactual first frames [N, 3, H, W] (and the Gaussian parameters when learned)."""
        if not self.config.is_learned:
            color = self.config.resolved_square_color
            return apply_fixed_square(first, points, color, self.config.square_size), None
        params = self.generator(tokens)
        _, _, H, W = first.shape
        field = render_fields(params, points, H, W)
        return (first + field.to(first.dtype)).clamp(0.0, 1.0), params

    def deltas(
        self,
        first: torch.Tensor,
        masked: MaskedInput,
        points: torch.Tensor,
        token_masked: Optional[MaskedInput] = None,
    ) -> Tuple[torch.Tensor, Optional[GaussianPerturbationParams]]:
        """
        Difference images for N query points.

        Args:
            first: [1, 3, H, W] shared by all points, or [N, 3, H, W]
            masked: Masked second frame with the same batch size as `first`
            points: [N, 2] query locations in the frame-1 coordinates
            token_masked: Separate mask draw for token extraction

        Returns:
            (delta [N, H, W], Gaussian parameters or None)
        """
        N = points.shape[0]
        with torch.no_grad():
            factual, tokens = self.predictor.forward_with_tokens(first, masked)
            if token_masked is not None:
                tokens = self.predictor.encode(first, token_masked)
        index = self._patch_index(points)
        rows = torch.arange(N) if tokens.shape[0] == N else torch.zeros(N, dtype=torch.long)
        point_tokens = tokens[rows, index].detach()

        if first.shape[0] == 1 and N > 1:
            first = first.expand(N, -1, -1, -1)
            masked = masked.repeat(N)
            factual = factual.expand(N, -1, -1, -1)
        perturbed, params = self.perturb(first, points, point_tokens)
        counterfactual = self.predictor(perturbed, masked)
        return (counterfactual - factual).abs().sum(dim=1), params

    def locate(self, delta: torch.Tensor, points: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Destination estimates [N, 2] and a degenerate flag [N].

        An all-zero difference gives p1 in argmax mode (zero flow) and the
        canvas centroid in softargmax mode.
        """
        degenerate = delta.flatten(1).amax(dim=1) <= 0
        if self.config.mode == "argmax":
            located = hard_argmax(delta)
            located = torch.where(degenerate[:, None], points.to(located.dtype), located)
        else:
            located = softargmax(delta, self.config.tau)
        return located, degenerate

    def multimask(
        self,
        first: torch.Tensor,
        second: torch.Tensor,
        points: torch.Tensor,
        pair_seed: int,
        scale: int = 0,
        num_masks: Optional[int] = None,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Average difference images over independent mask draws.

        Returns:
            (delta_avg [N, H, W], per_mask_max [N, M])
        """
        M = self.config.num_masks if num_masks is None else num_masks
        if M < 1:
            raise ValueError(f"num_masks must be >= 1, got {M}")
        deltas = []
        for i in range(M):
            masked = self.mask_images(second, self.mask_for(pair_seed, scale, i))
            token_masked = None
            if self.config.token_mask == "independent":
                token_masked = self.mask_images(second, self.mask_for(pair_seed, scale, i, token=True))
            delta, _ = self.deltas(first, masked, points, token_masked)
            deltas.append(delta)
        stacked = torch.stack(deltas)
        per_mask_max = stacked.flatten(2).amax(dim=2).transpose(0, 1)
        return _sorted_mean(stacked), per_mask_max

    def estimate_flows(
        self,
        first: torch.Tensor,
        second: torch.Tensor,
        points: torch.Tensor,
        mask: MaskSpec,
    ) -> torch.Tensor:
        """Differentiable flows [N, 2] from one mask draw (softargmax localisation)."""
        delta, _ = self.deltas(first, self.mask_images(second, mask), points)
        return softargmax(delta, self.config.tau) - points.to(delta.dtype)

    def probe(
        self,
        pair: FramePair,
        points: Sequence[PixelLocation],
        pair_seed: int = 0,
        num_masks: Optional[int] = None,
        num_scales: Optional[int] = None,
        crop_factor: Optional[float] = None,
    ) -> List[FlowPrediction]:
        """
        Multi-mask estimate on the full frame, then zoom-in refinement.

        Iteration i >= 1 crops frame 1 around p1 and frame 2 around the
        current estimate at crop_factor**i of the canvas, resizes both to the
        model resolution and re-probes. Occlusion comes from iteration 0.
        Refinement stops early once a crop would be smaller than 2 patches.
        """
        H, W = pair.size
        if (H, W) != (self.grid.height, self.grid.width):
            raise ValueError(f"Pair {H}x{W} does not match predictor grid {self.grid.height}x{self.grid.width}")
        for p in points:
            if not (0 <= p.row <= H - 1 and 0 <= p.col <= W - 1):
                raise ValueError(f"Query point {tuple(p)} outside {H}x{W} canvas")
        S = self.config.num_scales if num_scales is None else num_scales
        factor = self.config.crop_factor if crop_factor is None else crop_factor
        M = self.config.num_masks if num_masks is None else num_masks
        if S < 0:
            raise ValueError(f"num_scales must be >= 0, got {S}")

        first = pair.first.to_chw()
        second = pair.second.to_chw()
        coords = torch.tensor([[p.row, p.col] for p in points], dtype=first.dtype)
        with torch.no_grad():
            delta, per_mask_max = self.multimask(first, second, coords, pair_seed, 0, M)
            located, degenerate = self.locate(delta, coords)
        scores = _sorted_mean(per_mask_max, dim=1)

        estimates = [PixelLocation(float(r), float(c)) for r, c in located.tolist()]
        traces = [[estimate] for estimate in estimates]
        scales_run = 0
        for s in range(1, S + 1):
            crop = scaled_crop_size((H, W), factor, s)
            if min(crop) < 2 * self.grid.patch_size:
                logger.debug(f"Stopping refinement at iteration {s}: crop {crop} smaller than 2 patches")
                break
            for n, p1 in enumerate(points):
                t1 = CropTransform.centered(p1, crop, (H, W), (H, W))
                t2 = CropTransform.centered(estimates[n], crop, (H, W), (H, W))
                q = t1.to_crop(p1)
                q_tensor = torch.tensor([[q.row, q.col]], dtype=first.dtype)
                with torch.no_grad():
                    crop_delta, _ = self.multimask(t1.apply(first), t2.apply(second), q_tensor, pair_seed, s, M)
                    loc, deg = self.locate(crop_delta, q_tensor)
                if not bool(deg[0]):
                    estimates[n] = t2.from_crop(PixelLocation(float(loc[0, 0]), float(loc[0, 1])))
                traces[n].append(estimates[n])
            scales_run = s

        threshold = self.config.occlusion_threshold
        return [
            FlowPrediction(
                p1=PixelLocation(float(p1.row), float(p1.col)),
                p2_hat=estimates[n],
                occlusion_score=float(scores[n]),
                occluded=bool(scores[n] < threshold),
                per_mask_max=[float(v) for v in per_mask_max[n]],
                scale_trace=traces[n],
                degenerate=bool(degenerate[n]),
                num_masks=M,
                num_scales=scales_run,
            )
            for n, p1 in enumerate(points)
        ]


# ---------------------------------------------------------
# Public probe operations
# ---------------------------------------------------------

def flow_probe_single(
    model: NextFramePredictor,
    pair: FramePair,
    mask: MaskSpec,
    p1: PixelLocation,
    config: ProbeConfig,
    generator: Optional[PerturbationGenerator] = None,
    token_mask: Optional[MaskSpec] = None,
) -> Tuple[FlowPrediction, DifferenceImage]:
    """
    One factual/counterfactual pair of predictions under a given mask.

    Args:
        model: Predictor (trained or oracle stub)
        pair: Frame pair at the predictor's resolution
        mask: Mask draw shared by both predictions
        p1: Query point in frame 1
        config: Perturbation source, localisation mode and thresholds
        generator: Required for the learned perturbation
        token_mask: Mask used for token extraction when config.token_mask
            is "independent"; derived from `mask` when omitted

    Returns:
        (FlowPrediction, DifferenceImage)
    """
    H, W = pair.size
    if not (0 <= p1.row <= H - 1 and 0 <= p1.col <= W - 1):
        raise ValueError(f"p1 {tuple(p1)} outside {H}x{W} canvas")
    probe = FlowProbe(model, config, generator)
    second = pair.second.to_chw()
    first = pair.first.to_chw()
    token_masked = None
    if config.token_mask == "independent":
        if token_mask is None:
            token_mask = sample_asymmetric_mask(
                probe.grid, config.alpha_reveal, derive_seed(config.seed, mask.to_bitset(), "token")
            )
        token_masked = probe.mask_images(second, token_mask)
    coords = torch.tensor([[p1.row, p1.col]], dtype=first.dtype)
    with torch.no_grad():
        delta, _ = probe.deltas(first, probe.mask_images(second, mask), coords, token_masked)
        located, degenerate = probe.locate(delta, coords)
    peak = float(delta[0].max())
    prediction = FlowPrediction(
        p1=PixelLocation(float(p1.row), float(p1.col)),
        p2_hat=PixelLocation(float(located[0, 0]), float(located[0, 1])),
        occlusion_score=peak,
        occluded=peak < config.occlusion_threshold,
        per_mask_max=[peak],
        scale_trace=[PixelLocation(float(located[0, 0]), float(located[0, 1]))],
        degenerate=bool(degenerate[0]),
    )
    return prediction, DifferenceImage(delta[0])


def flow_probe_multimask(
    model: NextFramePredictor,
    pair: FramePair,
    p1: PixelLocation,
    config: ProbeConfig,
    generator: Optional[PerturbationGenerator] = None,
    num_masks: Optional[int] = None,
    pair_seed: int = 0,
) -> FlowPrediction:
    """Location from the mask-averaged difference image; occlusion from the mean per-mask peak."""
    return FlowProbe(model, config, generator).probe(pair, [p1], pair_seed, num_masks=num_masks, num_scales=0)[0]


def flow_probe_multiscale(
    model: NextFramePredictor,
    pair: FramePair,
    p1: PixelLocation,
    config: ProbeConfig,
    generator: Optional[PerturbationGenerator] = None,
    num_iters: Optional[int] = None,
    crop_factor: Optional[float] = None,
    num_masks: Optional[int] = None,
    pair_seed: int = 0,
) -> FlowPrediction:
    """Multi-mask estimate refined on successively smaller crops; see FlowProbe.probe."""
    return FlowProbe(model, config, generator).probe(
        pair, [p1], pair_seed, num_masks=num_masks, num_scales=num_iters, crop_factor=crop_factor
    )[0]


def probe_points(
    model: NextFramePredictor,
    pair: FramePair,
    points: Sequence[PixelLocation],
    config: ProbeConfig,
    generator: Optional[PerturbationGenerator] = None,
    pair_seed: int = 0,
) -> List[FlowPrediction]:
    """Probe many points of one pair with the configured mask and scale counts."""
    return FlowProbe(model, config, generator).probe(pair, points, pair_seed)


# ---------------------------------------------------------
# Perturbation maps
# ---------------------------------------------------------

@dataclass
class PerturbationMap:
    """Generator output on a strided grid of query points."""

    amplitude: np.ndarray
    sigma: np.ndarray
    offset: np.ndarray
    stride: int

    @property
    def shape(self) -> Tuple[int, int]:
        return int(self.amplitude.shape[0]), int(self.amplitude.shape[1])

    def to_array(self) -> np.ndarray:
        """[rows, cols, K, 6]: amplitude (3), offset (2), sigma (1) per component."""
        return np.concatenate([self.amplitude, self.offset, self.sigma[..., None]], axis=-1)


def export_perturbation_map(
    generator: PerturbationGenerator,
    model: NextFramePredictor,
    pair: FramePair,
    stride: int,
    config: ProbeConfig,
    pair_seed: int = 0,
) -> PerturbationMap:
    """
    Perturbation parameters for p1 on every `stride`-th pixel of frame 1.

    Map dims are ceil(H/stride) x ceil(W/stride). Tokens come from a single
    encoder pass with the probe's first mask draw.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    H, W = pair.size
    probe_config = config.model_copy(update={"perturbation": "learned"})
    probe = FlowProbe(model, probe_config, generator)
    first = pair.first.to_chw()
    masked = probe.mask_images(pair.second.to_chw(), probe.mask_for(pair_seed, 0, 0))
    rows = list(range(0, H, stride))
    cols = list(range(0, W, stride))
    points = torch.tensor([[r, c] for r in rows for c in cols], dtype=first.dtype)
    with torch.no_grad():
        tokens = model.encode(first, masked)
        params = generator(tokens[0, probe._patch_index(points)])
    K = params.num_components
    shape = (len(rows), len(cols), K)
    return PerturbationMap(
        amplitude=params.amplitude.reshape(*shape, 3).cpu().numpy(),
        sigma=params.sigma.reshape(*shape).cpu().numpy(),
        offset=params.offset.reshape(*shape, 2).cpu().numpy(),
        stride=stride,
    )
