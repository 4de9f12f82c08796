"""
RGB predictor service: inference helpers, positional-table interpolation,
oracle stub construction, checkpoint loading and the pretraining loop.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Sampler
from tqdm import tqdm

from app.core.exceptions import DivergenceError
from app.core.logging_config import logger
from app.core.seeding import derive_seed
from app.models.oracle import OracleWarpPredictor
from app.models.rgb_predictor import (
    NextFramePredictor,
    RgbPredictor,
    build_rgb_predictor,
    parameter_hash,
    resample_spacetime_table,
)
from app.schemas.corpus import DenseMotionTruth, Frame, PixelLocation
from app.schemas.patchwork import MaskedInput, PatchGrid
from app.schemas.predictor import PredictorConfig
from app.schemas.run_config import RgbSection
from app.services.checkpoint_storage import CheckpointStorage, load_checkpoint
from app.services.corpus import SpritePairDataset
from app.services.patchwork import apply_mask_batch, sample_mask
from app.services.schedule import build_optimizer


def _inference(model: torch.nn.Module):
    was_training = model.training
    model.eval()
    return was_training


def predict_next_frame(model: NextFramePredictor, first: Frame, masked_second: MaskedInput) -> Frame:
    """
    Predict the full second frame from frame 1 and the masked second frame.

    Runs in inference mode; deterministic for fixed inputs and parameters.
    """
    was_training = _inference(model)
    try:
        with torch.no_grad():
            out = model(first.to_chw(), masked_second)
    finally:
        model.train(was_training)
    return Frame.from_chw(out)


def extract_patch_token(
    model: NextFramePredictor,
    first: Frame,
    masked_second: MaskedInput,
    p1: PixelLocation,
) -> torch.Tensor:
    """
    Last-encoder-block feature of the frame-1 patch containing p1.

    Pixels on a patch boundary belong to patch (floor(row/p), floor(col/p)).

    Raises:
        ValueError: p1 outside the canvas
    """
    index = masked_second.grid.patch_of_pixel(p1.row, p1.col)
    was_training = _inference(model)
    try:
        with torch.no_grad():
            _, tokens = model.forward_with_tokens(first.to_chw(), masked_second)
    finally:
        model.train(was_training)
    return tokens[0, index]


def interpolate_positional_embeddings(model: RgbPredictor, new_resolution: Tuple[int, int]) -> RgbPredictor:
    """
    Copy of `model` for a new input resolution.

    Learnable positional tables are resampled bicubically over the patch
    grid; sinusoidal tables are regenerated for the new grid.

    Raises:
        ValueError: a resolution that does not divide into whole patches
    """
    config = model.config
    height, width = new_resolution
    new_grid = PatchGrid.for_size(height, width, config.patch_size)
    new_config = config.model_copy(update={"height": height, "width": width})
    resized = RgbPredictor(new_config)

    state = dict(model.state_dict())
    if config.pos_embed == "learnable":
        state["pos_embed"] = resample_spacetime_table(model.pos_embed.detach(), model.grid, new_grid)
        state["decoder_pos_embed"] = resample_spacetime_table(model.decoder_pos_embed.detach(), model.grid, new_grid)
    resized.load_state_dict(state)
    if model.frozen:
        resized.freeze()
    logger.info(f"Interpolated positional embeddings {model.grid.rows}x{model.grid.cols} -> {new_grid.rows}x{new_grid.cols}")
    return resized


def make_oracle_warp_predictor(
    warp: DenseMotionTruth,
    patch_size: int = 4,
    background: Optional[Frame] = None,
    fill: float = 0.0,
) -> OracleWarpPredictor:
    """Stub predictor that forward-warps frame 1 by `warp`, ignoring frame-2 content."""
    return OracleWarpPredictor(warp, patch_size=patch_size, background=background, fill=fill)


def load_rgb_predictor(path: Path, interpolate_to: Optional[Tuple[int, int]] = None) -> RgbPredictor:
    """Rebuild a predictor from an "rgb" checkpoint, optionally resampled to another resolution."""
    payload = load_checkpoint(path, kind="rgb")
    config = PredictorConfig.model_validate_json(payload["config_json"])
    model = RgbPredictor(config)
    model.load_state_dict(payload["state_dict"])
    if interpolate_to is not None and tuple(interpolate_to) != (config.height, config.width):
        model = interpolate_positional_embeddings(model, interpolate_to)
    return model


def copy_baseline_mse(first: torch.Tensor, second: torch.Tensor) -> float:
    """MSE of predicting frame 2 as a copy of frame 1."""
    return float(F.mse_loss(first, second))


class StepSampler(Sampler):
    """Dataset indices for steps [start, total), wrapping around the dataset."""

    def __init__(self, length: int, samples_per_step: int, start_step: int, total_steps: int):
        self.length = length
        self.samples_per_step = samples_per_step
        self.start_step = start_step
        self.total_steps = total_steps

    def __iter__(self) -> Iterator[int]:
        for i in range(self.start_step * self.samples_per_step, self.total_steps * self.samples_per_step):
            yield i % self.length

    def __len__(self) -> int:
        return max(0, self.total_steps - self.start_step) * self.samples_per_step


@dataclass
class TrainResult:
    history: List[Dict[str, float]] = field(default_factory=list)
    initial_val_loss: float = float("nan")
    final_val_loss: float = float("nan")
    checkpoints: List[Path] = field(default_factory=list)
    param_hash: str = ""

    @property
    def val_improvement(self) -> float:
        return self.initial_val_loss / max(self.final_val_loss, 1e-12)


class RgbTrainer:
    """
    Pretraining loop for the RGB predictor: full-frame MSE between the
    predicted and true second frame, masks drawn by the configured policy.

    Batch contents and mask draws are functions of (seed, step), so a run
    resumed from a checkpoint continues exactly where it stopped.
    """

    def __init__(
        self,
        model: RgbPredictor,
        dataset: SpritePairDataset,
        section: RgbSection,
        storage: CheckpointStorage,
        seed: int = 0,
        jobs: int = 1,
        device: str = "cpu",
    ):
        if model.frozen:
            raise ValueError("Cannot train a frozen predictor")
        self.model = model.to(device)
        self.dataset = dataset
        self.section = section
        self.schedule = section.schedule
        self.storage = storage
        self.seed = seed
        self.jobs = jobs
        self.device = torch.device(device)
        self.grid = model.grid
        self.optimizer, self.scheduler = build_optimizer(model.parameters(), self.schedule)
        self.step = 0
        self.val_batch = self._build_val_batch()

    def _masks(self, tag: str, step: int, count: int):
        s = self.section
        return [
            sample_mask(
                self.grid, s.mask_policy, derive_seed(self.seed, tag, step, i),
                alpha_reveal=s.alpha_reveal, frac_f1=s.mask_fraction_f1, frac_f2=s.mask_fraction_f2,
            )
            for i in range(count)
        ]

    def _build_val_batch(self):
        val = SpritePairDataset(self.dataset.config, self.section.val_batch, derive_seed(self.seed, "val"))
        items = [val[i] for i in range(len(val))]
        first = torch.stack([item["first"] for item in items]).to(self.device)
        second = torch.stack([item["second"] for item in items]).to(self.device)
        masked = apply_mask_batch(second, self._masks("val-mask", 0, len(items)), self.grid).to(self.device)
        return first, second, masked

    def validation_loss(self) -> float:
        first, second, masked = self.val_batch
        was_training = _inference(self.model)
        try:
            with torch.no_grad():
                return float(F.mse_loss(self.model(first, masked), second))
        finally:
            self.model.train(was_training)

    def resume(self, path: Path) -> None:
        payload = load_checkpoint(path, kind="rgb")
        self.model.load_state_dict(payload["state_dict"])
        if payload.get("optimizer"):
            self.optimizer.load_state_dict(payload["optimizer"])
        if payload.get("scheduler"):
            self.scheduler.load_state_dict(payload["scheduler"])
        self.step = int(payload["step"])
        logger.info(f"Resumed RGB training from {path} at step {self.step}")

    def _save(self) -> Path:
        return self.storage.save(
            config_json=self.model.config.model_dump_json(),
            state_dict=self.model.state_dict(),
            param_hash=parameter_hash(self.model),
            step=self.step,
            epoch=self.step // self.schedule.steps_per_epoch,
            optimizer=self.optimizer,
            scheduler=self.scheduler,
            extra={"mask_policy": self.section.mask_policy},
        )

    def train_step(self, batches: List[Dict[str, torch.Tensor]]) -> Tuple[float, float]:
        """One optimizer step over accumulated micro-batches; returns (loss, grad norm)."""
        self.model.train()
        acc = len(batches)
        total = 0.0
        for m, batch in enumerate(batches):
            first = batch["first"].to(self.device)
            second = batch["second"].to(self.device)
            masks = self._masks("mask", self.step * acc + m, first.shape[0])
            masked = apply_mask_batch(second, masks, self.grid).to(self.device)
            loss = F.mse_loss(self.model(first, masked), second)
            if not torch.isfinite(loss):
                raise DivergenceError(self.step, self.storage.latest())
            (loss / acc).backward()
            total += float(loss) / acc
        grad_norm = float(torch.nn.utils.clip_grad_norm_(self.model.parameters(), float("inf")))
        self.optimizer.step()
        self.scheduler.step()
        self.optimizer.zero_grad(set_to_none=True)
        self.step += 1
        return total, grad_norm

    def train(self, max_steps: Optional[int] = None) -> TrainResult:
        """
        Run until the schedule's last step (or `max_steps` total steps).

        Returns:
            TrainResult with per-step history and validation losses

        Raises:
            DivergenceError: non-finite loss; carries the last good checkpoint
        """
        s = self.schedule
        total = s.total_steps if max_steps is None else min(max_steps, s.total_steps)
        acc = s.accumulation_steps
        result = TrainResult(initial_val_loss=self.validation_loss())
        logger.info(
            f"Training RGB predictor: steps {self.step}->{total}, peak lr {s.peak_lr:.3g}, "
            f"policy {self.section.mask_policy}, initial val MSE {result.initial_val_loss:.5f}"
        )
        loader = DataLoader(
            self.dataset,
            batch_size=s.batch_size,
            sampler=StepSampler(len(self.dataset), s.effective_batch, self.step, total),
            num_workers=max(0, self.jobs - 1),
        )
        micro: List[Dict[str, torch.Tensor]] = []
        progress = tqdm(total=total - self.step, desc="train-rgb", disable=None)
        for batch in loader:
            micro.append(batch)
            if len(micro) < acc:
                continue
            loss, grad_norm = self.train_step(micro)
            micro = []
            lr = self.scheduler.get_last_lr()[0]
            row = {"step": self.step, "loss": loss, "lr": lr, "grad_norm": grad_norm}
            if self.step % s.log_every == 0:
                logger.info(f"step {self.step}: loss {loss:.5f} lr {lr:.3g} grad_norm {grad_norm:.3f}")
            if self.step % s.checkpoint_every == 0 or self.step == total:
                row["val_loss"] = self.validation_loss()
                result.checkpoints.append(self._save())
            result.history.append(row)
            progress.update(1)
        progress.close()

        result.final_val_loss = self.validation_loss()
        result.param_hash = parameter_hash(self.model)
        if result.val_improvement < s.min_val_improvement:
            logger.warning(
                f"Validation MSE improved {result.val_improvement:.2f}x, below the required "
                f"{s.min_val_improvement:.2f}x"
            )
        logger.info(f"RGB training done: val MSE {result.initial_val_loss:.5f} -> {result.final_val_loss:.5f}")
        return result


def train_rgb(
    section: RgbSection,
    dataset: SpritePairDataset,
    output_dir: Path,
    seed: int = 0,
    jobs: int = 1,
    device: str = "cpu",
    model: Optional[RgbPredictor] = None,
    max_steps: Optional[int] = None,
) -> Tuple[RgbPredictor, TrainResult]:
    """Build (or take) a predictor, optionally resume, and train it."""
    model = model if model is not None else build_rgb_predictor(section.model, seed=derive_seed(seed, "rgb-init"))
    trainer = RgbTrainer(model, dataset, section, CheckpointStorage(Path(output_dir), "rgb"), seed, jobs, device)
    if section.resume is not None:
        trainer.resume(section.resume)
    return trainer.model, trainer.train(max_steps=max_steps)
