"""
Flow-conditioned predictor service: sparse conditioning, prediction, and
the joint bootstrap loop that trains the perturbation generator and the
flow predictor together through the frozen RGB predictor.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader
from tqdm import tqdm

from app.core.exceptions import DataError, DivergenceError
from app.core.logging_config import logger
from app.core.seeding import derive_seed
from app.models.flow_predictor import FlowPredictor, build_flow_predictor
from app.models.perturbation import PerturbationGenerator
from app.models.rgb_predictor import NextFramePredictor, parameter_hash
from app.schemas.corpus import Frame, FramePair, PixelLocation
from app.schemas.flow_predictor import FlowPredictorConfig, JointTrainState, SparseFlowConditioning
from app.schemas.patchwork import PatchGrid
from app.schemas.probe import ProbeConfig
from app.schemas.run_config import JointSection
from app.services.checkpoint_storage import CheckpointStorage, load_checkpoint
from app.services.corpus import SpritePairDataset, sample_query_pixels
from app.services.patchwork import patchify
from app.services.plots import plot_perturbation_map
from app.services.probe import FlowProbe, export_perturbation_map
from app.services.result_formatter import write_perturbation_map
from app.services.rgb_predictor import StepSampler
from app.services.schedule import build_optimizer


# ---------------------------------------------------------
# Conditioning and prediction
# ---------------------------------------------------------

def encode_conditioning(
    points: Sequence[PixelLocation],
    flows,
    first: Frame,
    grid: PatchGrid,
) -> SparseFlowConditioning:
    """
    One conditioning entry per distinct patch holding a query point.

    When several points fall into one patch the first one wins and the rest
    are counted as collisions.

    Args:
        points: Query locations in frame 1
        flows: [n, 2] tensor (may carry gradients) or a sequence of (drow, dcol)
        first: Frame 1; the only RGB source of the conditioning
        grid: Patch grid of the flow predictor

    Raises:
        ValueError: |points| != |flows| or a point outside the canvas
    """
    flows = flows if isinstance(flows, torch.Tensor) else torch.tensor(flows, dtype=torch.float32).reshape(-1, 2)
    if len(points) != flows.shape[0]:
        raise ValueError(f"Got {len(points)} points but {flows.shape[0]} flows")
    keep: List[int] = []
    indices: List[int] = []
    for i, p in enumerate(points):
        index = grid.patch_of_pixel(p.row, p.col)
        if index in indices:
            continue
        keep.append(i)
        indices.append(index)
    collisions = len(points) - len(keep)
    if collisions:
        logger.warning(f"{collisions} query point(s) share a patch with an earlier point; keeping the first")
    patch_index = torch.tensor(indices, dtype=torch.long)
    rgb = patchify(first, grid)[patch_index].to(flows.device)
    return SparseFlowConditioning(
        patch_indices=patch_index,
        flows=flows[torch.tensor(keep, dtype=torch.long)],
        rgb_patches=rgb.to(flows.dtype),
        grid=grid,
        collisions=collisions,
    )


def _dense_batch(conditions: Sequence[SparseFlowConditioning]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    dense = [c.to_dense() for c in conditions]
    return tuple(torch.stack([d[k] for d in dense]) for k in range(3))


def predict_from_flow(model: FlowPredictor, first: Frame, cond: SparseFlowConditioning) -> Frame:
    """
    Predict frame 2 from frame 1 and sparse flow conditioning alone.

    Raises:
        ValueError: empty conditioning
    """
    if cond.density == 0:
        raise ValueError("Conditioning is empty; the flow predictor needs at least one flow vector")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            flow, rgb, present = _dense_batch([cond])
            out = model(first.to_chw(), flow, rgb, present)
    finally:
        model.train(was_training)
    return Frame.from_chw(out)


def shuffled_flow_gap(
    model: FlowPredictor,
    dataset: SpritePairDataset,
    n_points: int,
    seed: int = 0,
    num_pairs: Optional[int] = None,
) -> Tuple[float, float]:
    """
    Next-frame MSE with true sparse flows, and with the same conditioning
    after permuting its flows among the conditioned patches.

    A predictor that reads the flow scores worse on the shuffled side.

    Returns:
        (mse_true, mse_shuffled) averaged over pairs

    Raises:
        DataError: a pair carries no exact flow truth
    """
    count = len(dataset) if num_pairs is None else min(num_pairs, len(dataset))
    true_mse, shuffled_mse = [], []
    for i in range(count):
        item = dataset[i]
        first = Frame.from_chw(item["first"])
        points = sample_query_pixels(first, n_points, "uniform_random", derive_seed(seed, "shuffle-points", i))
        coords = torch.tensor([[p.row, p.col] for p in points], dtype=item["first"].dtype)
        flows = _oracle_flows(item["flow"], coords)
        if not torch.isfinite(flows).all():
            raise DataError("Shuffled-flow check needs exact flow truth; disable random_resized_crop")
        cond = encode_conditioning(points, flows, first, model.grid)
        shuffled = cond.shuffled(torch.Generator().manual_seed(derive_seed(seed, "shuffle", i)))
        for c, scores in ((cond, true_mse), (shuffled, shuffled_mse)):
            predicted = predict_from_flow(model, first, c)
            scores.append(float(F.mse_loss(predicted.to_chw()[0], item["second"])))
    return sum(true_mse) / count, sum(shuffled_mse) / count


# ---------------------------------------------------------
# Joint bootstrap training
# ---------------------------------------------------------

def build_perturbation_generator(
    token_dim: int,
    config: ProbeConfig,
    patch_size: int,
    seed: int = 0,
) -> PerturbationGenerator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        generator = PerturbationGenerator(
            token_dim,
            num_gaussians=config.num_gaussians,
            hidden_dim=config.generator_hidden,
            bounds=config.bounds(patch_size),
        )
    logger.info(f"PerturbationGenerator built: {generator.num_parameters:,} parameters, K={config.num_gaussians}")
    return generator


@dataclass
class JointTrainResult:
    history: List[Dict[str, float]] = field(default_factory=list)
    initial_val_loss: float = float("nan")
    final_val_loss: float = float("nan")
    initial_flow_error: Optional[float] = None
    final_flow_error: Optional[float] = None
    checkpoints: List[Path] = field(default_factory=list)
    maps: List[Path] = field(default_factory=list)
    param_hash: str = ""


def _weight_fingerprint(model: nn.Module) -> torch.Tensor:
    """Per-tensor sum and sum of squares in float64; any weight update moves it."""
    values = [p.detach().double() for p in model.parameters()]
    if not values:
        return torch.zeros(0, dtype=torch.float64)
    return torch.stack([torch.stack([v.sum(), v.pow(2).sum()]) for v in values])


def _oracle_flows(item_flow: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    rows = points[:, 0].floor().long()
    cols = points[:, 1].floor().long()
    return item_flow[rows, cols].to(points.dtype)


class JointTrainer:
    """
    Trains the perturbation generator (through the probe) and the flow
    predictor on next-frame MSE. The RGB predictor is frozen: after every
    step it must hold no trainable parameters or gradients and keep its
    weight fingerprint; its full parameter hash is checked at every
    checkpoint and at the end of the run.
    """

    def __init__(
        self,
        rgb_model: NextFramePredictor,
        dataset: SpritePairDataset,
        section: JointSection,
        probe_config: ProbeConfig,
        storage: CheckpointStorage,
        seed: int = 0,
        jobs: int = 1,
        device: str = "cpu",
        generator: Optional[PerturbationGenerator] = None,
        flow_model: Optional[FlowPredictor] = None,
    ):
        if not getattr(rgb_model, "frozen", False):
            raise ValueError("Joint training needs a frozen RGB predictor")
        if section.model.grid != rgb_model.grid:
            raise ValueError(
                f"Flow predictor grid {section.model.grid} does not match RGB predictor grid {rgb_model.grid}"
            )
        self.section = section
        self.schedule = section.schedule
        self.dataset = dataset
        self.storage = storage
        self.seed = seed
        self.jobs = jobs
        self.device = torch.device(device)
        self.grid = rgb_model.grid
        self.probe_config = probe_config.model_copy(
            update={"perturbation": "learned", "mode": "softargmax", "tau": section.tau, "num_masks": 1, "num_scales": 0}
        )
        if generator is None:
            generator = build_perturbation_generator(
                rgb_model.token_dim, self.probe_config, self.grid.patch_size, derive_seed(seed, "generator-init")
            )
        if flow_model is None:
            flow_model = build_flow_predictor(section.model, derive_seed(seed, "flow-init"))
        if not section.train_generator:
            generator.requires_grad_(False)
        self.trainable = nn.ModuleDict({"generator": generator, "flow_model": flow_model}).to(self.device)
        self.rgb_model = rgb_model.to(self.device)
        self.probe = FlowProbe(self.rgb_model, self.probe_config, generator)

        optimizer, scheduler = build_optimizer(self.trainable.parameters(), self.schedule)
        self.state = JointTrainState(
            generator=generator,
            flow_model=flow_model,
            rgb_model=rgb_model,
            rgb_param_hash=parameter_hash(rgb_model),
            optimizer=optimizer,
            scheduler=scheduler,
        )
        self._rgb_fingerprint = _weight_fingerprint(rgb_model)
        self.val_items = self._build_val_items()

    def _build_val_items(self) -> List[Dict[str, torch.Tensor]]:
        val = SpritePairDataset(self.dataset.config, self.section.val_pairs, derive_seed(self.seed, "joint-val"))
        return [val[i] for i in range(len(val))]

    # ------------------------------------------------------------
    # One pair
    # ------------------------------------------------------------

    def _pair_conditioning(
        self,
        item: Dict[str, torch.Tensor],
        pair_seed: int,
    ) -> Tuple[SparseFlowConditioning, Optional[float]]:
        """Conditioning for one pair plus the mean flow error against truth (None if unavailable)."""
        first = item["first"].to(self.device)[None]
        second = item["second"].to(self.device)[None]
        frame = Frame.from_chw(first.cpu())
        points = sample_query_pixels(frame, self.section.n_points, "uniform_random", derive_seed(pair_seed, "points"))
        coords = torch.tensor([[p.row, p.col] for p in points], dtype=first.dtype, device=self.device)
        truth = _oracle_flows(item["flow"].to(self.device), coords)
        has_truth = bool(torch.isfinite(truth).all())

        if self.section.flow_source == "oracle":
            if not has_truth:
                raise DataError("Oracle flow source needs exact flow truth; disable random_resized_crop")
            flows = truth
        else:
            mask = self.probe.mask_for(pair_seed, 0, 0)
            flows = self.probe.estimate_flows(first, second, coords, mask)

        error = None
        if has_truth:
            visible = ~item["occluded"].to(self.device)[coords[:, 0].long(), coords[:, 1].long()]
            if visible.any():
                error = float((flows.detach() - truth).norm(dim=-1)[visible].mean())
        return encode_conditioning(points, flows, frame, self.grid), error

    def _batch_loss(self, items: List[Dict[str, torch.Tensor]], seeds: Sequence[int]) -> Tuple[torch.Tensor, Optional[float]]:
        conditions, errors = [], []
        for item, pair_seed in zip(items, seeds):
            cond, error = self._pair_conditioning(item, pair_seed)
            conditions.append(cond)
            if error is not None:
                errors.append(error)
        flow, rgb, present = _dense_batch(conditions)
        first = torch.stack([item["first"] for item in items]).to(self.device)
        second = torch.stack([item["second"] for item in items]).to(self.device)
        prediction = self.state.flow_model(first, flow, rgb.to(first.dtype), present)
        mean_error = sum(errors) / len(errors) if errors else None
        return F.mse_loss(prediction, second), mean_error

    # ------------------------------------------------------------
    # Steps, validation, checkpoints
    # ------------------------------------------------------------

    def validation(self) -> Tuple[float, Optional[float]]:
        """(MSE, mean flow error) on the fixed validation pairs."""
        flow_model = self.state.flow_model
        was_training = flow_model.training
        flow_model.eval()
        try:
            with torch.no_grad():
                seeds = [derive_seed(self.seed, "joint-val-pair", i) for i in range(len(self.val_items))]
                loss, error = self._batch_loss(self.val_items, seeds)
        finally:
            flow_model.train(was_training)
        return float(loss), error

    def train_step(self, batches: List[Dict[str, torch.Tensor]]) -> Tuple[float, Optional[float], float]:
        """One optimizer step over accumulated micro-batches; returns (loss, flow error, grad norm)."""
        state = self.state
        state.flow_model.train()
        acc = len(batches)
        total, errors = 0.0, []
        for m, batch in enumerate(batches):
            items = [{key: value[b] for key, value in batch.items()} for b in range(batch["first"].shape[0])]
            seeds = [derive_seed(self.seed, "joint", state.step * acc + m, b) for b in range(len(items))]
            loss, error = self._batch_loss(items, seeds)
            if not torch.isfinite(loss):
                raise DivergenceError(state.step, self.storage.latest())
            (loss / acc).backward()
            total += float(loss) / acc
            if error is not None:
                errors.append(error)
        params = [p for p in self.trainable.parameters() if p.requires_grad]
        grad_norm = float(torch.nn.utils.clip_grad_norm_(params, float("inf")))
        state.optimizer.step()
        state.scheduler.step()
        state.optimizer.zero_grad(set_to_none=True)
        state.step += 1
        self.check_rgb_frozen()

        flow_error = sum(errors) / len(errors) if errors else None
        state.loss_history.append(total)
        state.flow_error_history.append(flow_error)
        state.grad_norm_history.append(grad_norm)
        return total, flow_error, grad_norm

    def check_rgb_frozen(self) -> None:
        """Per-step guard on the RGB predictor: no trainable parameters, no gradients, same weights."""
        model = self.state.rgb_model
        if any(p.requires_grad or p.grad is not None for p in model.parameters()):
            raise RuntimeError(f"Frozen RGB predictor became trainable at joint step {self.state.step}")
        if not torch.equal(_weight_fingerprint(model), self._rgb_fingerprint):
            raise RuntimeError(f"Frozen RGB predictor changed during joint training at step {self.state.step}")

    def verify_rgb_unchanged(self) -> None:
        current = parameter_hash(self.state.rgb_model)
        if current != self.state.rgb_param_hash:
            raise RuntimeError(
                f"Frozen RGB predictor changed during joint training: {self.state.rgb_param_hash[:12]} -> {current[:12]}"
            )

    def _save(self) -> Path:
        self.verify_rgb_unchanged()
        return self.storage.save(
            config_json=self.section.model.model_dump_json(),
            state_dict=self.trainable.state_dict(),
            param_hash=parameter_hash(self.trainable),
            step=self.state.step,
            epoch=self.state.step // self.schedule.steps_per_epoch,
            optimizer=self.state.optimizer,
            scheduler=self.state.scheduler,
            extra={
                "rgb_param_hash": self.state.rgb_param_hash,
                "probe_config_json": self.probe_config.model_dump_json(),
                "token_dim": self.state.generator.token_dim,
            },
        )

    def _snapshot_map(self, directory: Path) -> Path:
        item = self.val_items[0]
        pair = _item_pair(item)
        perturbation_map = export_perturbation_map(
            self.state.generator, self.rgb_model, pair, self.grid.patch_size, self.probe_config,
            pair_seed=derive_seed(self.seed, "joint-map"),
        )
        stem = directory / f"perturbation_map_step{self.state.step:07d}"
        path = write_perturbation_map(perturbation_map, stem.with_suffix(".npy"))
        plot_perturbation_map(perturbation_map, stem.with_suffix(".png"))
        return path

    def resume(self, path: Path) -> None:
        payload = load_joint_checkpoint(path, self.state.rgb_param_hash)
        self.trainable.load_state_dict(payload["state_dict"])
        if payload.get("optimizer"):
            self.state.optimizer.load_state_dict(payload["optimizer"])
        if payload.get("scheduler"):
            self.state.scheduler.load_state_dict(payload["scheduler"])
        self.state.step = int(payload["step"])
        logger.info(f"Resumed joint training from {path} at step {self.state.step}")

    def train(self, max_steps: Optional[int] = None) -> JointTrainResult:
        """
        Run the joint loop until the schedule's last step (or `max_steps`).

        Raises:
            DivergenceError: non-finite loss; carries the last good checkpoint
            RuntimeError: the frozen RGB predictor changed
        """
        s = self.schedule
        total = s.total_steps if max_steps is None else min(max_steps, s.total_steps)
        acc = s.accumulation_steps
        result = JointTrainResult()
        result.initial_val_loss, result.initial_flow_error = self.validation()
        logger.info(
            f"Joint training: steps {self.state.step}->{total}, flow source {self.section.flow_source}, "
            f"train generator {self.section.train_generator}, initial val MSE {result.initial_val_loss:.5f}"
        )
        map_dir = self.storage.directory / "maps"
        if self.section.map_every:
            map_dir.mkdir(parents=True, exist_ok=True)
            result.maps.append(self._snapshot_map(map_dir))

        loader = DataLoader(
            self.dataset,
            batch_size=s.batch_size,
            sampler=StepSampler(len(self.dataset), s.effective_batch, self.state.step, total),
            num_workers=max(0, self.jobs - 1),
        )
        micro = []
        progress = tqdm(total=total - self.state.step, desc="train-joint", disable=None)
        for batch in loader:
            micro.append(batch)
            if len(micro) < acc:
                continue
            loss, flow_error, grad_norm = self.train_step(micro)
            micro = []
            step = self.state.step
            lr = self.state.scheduler.get_last_lr()[0]
            row = {"step": step, "loss": loss, "flow_error": flow_error, "lr": lr, "grad_norm": grad_norm}
            if step % s.log_every == 0:
                error_text = f"{flow_error:.3f}" if flow_error is not None else "n/a"
                logger.info(f"step {step}: loss {loss:.5f} flow_error {error_text} lr {lr:.3g} grad_norm {grad_norm:.3f}")
            if step % s.checkpoint_every == 0 or step == total:
                row["val_loss"], row["val_flow_error"] = self.validation()
                result.checkpoints.append(self._save())
            if self.section.map_every and step % self.section.map_every == 0:
                result.maps.append(self._snapshot_map(map_dir))
            result.history.append(row)
            progress.update(1)
        progress.close()

        self.verify_rgb_unchanged()
        result.final_val_loss, result.final_flow_error = self.validation()
        result.param_hash = parameter_hash(self.trainable)
        logger.info(f"Joint training done: val MSE {result.initial_val_loss:.5f} -> {result.final_val_loss:.5f}")
        return result


def _item_pair(item: Dict[str, torch.Tensor]) -> FramePair:
    return FramePair(Frame.from_chw(item["first"]), Frame.from_chw(item["second"]))


def load_joint_checkpoint(path: Path, rgb_param_hash: Optional[str] = None) -> Dict:
    """
    Read a joint checkpoint, checking it was trained against the given RGB predictor.

    Raises:
        DataError: unreadable archive or RGB predictor hash mismatch
    """
    payload = load_checkpoint(path, kind="joint")
    stored = payload.get("rgb_param_hash")
    if rgb_param_hash is not None and stored != rgb_param_hash:
        raise DataError(
            f"Joint checkpoint {path} was trained against RGB predictor {str(stored)[:12]}, "
            f"got {rgb_param_hash[:12]}"
        )
    return payload


def load_joint_models(path: Path, rgb_model: NextFramePredictor) -> Tuple[PerturbationGenerator, FlowPredictor, ProbeConfig]:
    """Rebuild the generator and flow predictor stored in a joint checkpoint."""
    payload = load_joint_checkpoint(path, parameter_hash(rgb_model))
    probe_config = ProbeConfig.model_validate_json(payload["probe_config_json"])
    generator = PerturbationGenerator(
        int(payload["token_dim"]),
        num_gaussians=probe_config.num_gaussians,
        hidden_dim=probe_config.generator_hidden,
        bounds=probe_config.bounds(rgb_model.grid.patch_size),
    )
    flow_model = FlowPredictor(FlowPredictorConfig.model_validate_json(payload["config_json"]))
    modules = nn.ModuleDict({"generator": generator, "flow_model": flow_model})
    modules.load_state_dict(payload["state_dict"])
    return generator.eval(), flow_model.eval(), probe_config


def joint_train(
    rgb_model: NextFramePredictor,
    section: JointSection,
    probe_config: ProbeConfig,
    dataset: SpritePairDataset,
    output_dir: Path,
    seed: int = 0,
    jobs: int = 1,
    device: str = "cpu",
    max_steps: Optional[int] = None,
) -> Tuple[JointTrainState, JointTrainResult]:
    """Build the generator and flow predictor, optionally resume, and train them jointly."""
    trainer = JointTrainer(
        rgb_model, dataset, section, probe_config, CheckpointStorage(Path(output_dir), "joint"), seed, jobs, device
    )
    if section.resume is not None:
        trainer.resume(section.resume)
    return trainer.state, trainer.train(max_steps=max_steps)
