from typing import Any, Dict, Literal, Tuple

from pydantic import BaseModel, Field, model_validator

from app.schemas.patchwork import PatchGrid

PositionalMode = Literal["learnable", "sinusoidal"]

_PREDICTOR_PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": dict(
        height=32, width=32, patch_size=4,
        embed_dim_enc=128, heads_enc=4, depth_enc=4,
        embed_dim_dec=64, heads_dec=2, depth_dec=2,
    ),
    # ViT-B encoder, 8x8 patches, 256x256 input
    "paper": dict(
        height=256, width=256, patch_size=8,
        embed_dim_enc=768, heads_enc=12, depth_enc=12,
        embed_dim_dec=512, heads_dec=16, depth_dec=8,
    ),
    # Small enough for finite-difference gradient checks
    "micro": dict(
        height=8, width=8, patch_size=4,
        embed_dim_enc=4, heads_enc=1, depth_enc=1,
        embed_dim_dec=4, heads_dec=1, depth_dec=1, mlp_ratio=1.0,
    ),
}


def expand_preset(data: Any, presets: Dict[str, Dict[str, Any]]) -> Any:
    """Fill fields from a named preset; explicit fields win."""
    if isinstance(data, dict) and "preset" in data:
        data = dict(data)
        name = data.pop("preset")
        if name not in presets:
            raise ValueError(f"Unknown preset '{name}'; expected one of {sorted(presets)}")
        data = {**presets[name], **data}
    return data


class PredictorConfig(BaseModel):
    """Architecture of the RGB-conditioned two-frame predictor."""

    height: int = Field(32, ge=1, description="Input height in pixels")
    width: int = Field(32, ge=1, description="Input width in pixels")
    patch_size: int = Field(4, ge=1, description="Square patch side in pixels")
    embed_dim_enc: int = Field(128, ge=1, description="Encoder token width")
    heads_enc: int = Field(4, ge=1, description="Encoder attention heads")
    depth_enc: int = Field(4, ge=1, description="Encoder blocks")
    embed_dim_dec: int = Field(64, ge=1, description="Decoder token width")
    heads_dec: int = Field(2, ge=1, description="Decoder attention heads")
    depth_dec: int = Field(2, ge=1, description="Decoder blocks")
    mlp_ratio: float = Field(4.0, gt=0, description="Hidden width of block MLPs relative to token width")
    pos_embed: PositionalMode = Field("learnable", description="Positional encoding of the spatiotemporal grid")
    interpolate_pos_embed: bool = Field(
        False, description="Resample the positional table when inputs do not match the trained resolution"
    )

    @model_validator(mode="before")
    @classmethod
    def _apply_preset(cls, data: Any) -> Any:
        return expand_preset(data, _PREDICTOR_PRESETS)

    @model_validator(mode="after")
    def _validate(self) -> "PredictorConfig":
        if self.embed_dim_enc % self.heads_enc:
            raise ValueError(f"embed_dim_enc {self.embed_dim_enc} not divisible by heads_enc {self.heads_enc}")
        if self.embed_dim_dec % self.heads_dec:
            raise ValueError(f"embed_dim_dec {self.embed_dim_dec} not divisible by heads_dec {self.heads_dec}")
        PatchGrid.for_size(self.height, self.width, self.patch_size)
        return self

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid.for_size(self.height, self.width, self.patch_size)

    @classmethod
    def desk(cls, **overrides) -> "PredictorConfig":
        return cls(preset="desk", **overrides)

    @classmethod
    def paper(cls, **overrides) -> "PredictorConfig":
        return cls(preset="paper", **overrides)

    @classmethod
    def micro(cls, **overrides) -> "PredictorConfig":
        return cls(preset="micro", **overrides)


class TrainSchedule(BaseModel):
    """
    Optimizer and learning-rate schedule.

    The peak learning rate follows the linear scaling rule
    lr = base_lr * effective_batch / 256; it warms up linearly and then
    decays along a half cosine.
    """

    base_lr: float = Field(1.5e-4, ge=0, description="Learning rate at batch 256")
    weight_decay: float = Field(0.05, ge=0, description="Decoupled weight decay")
    betas: Tuple[float, float] = Field((0.9, 0.95), description="Adam betas")
    warmup_epochs: int = Field(40, ge=0, description="Linear warmup length")
    total_epochs: int = Field(800, ge=1, description="Training length")
    steps_per_epoch: int = Field(100, ge=1, description="Optimizer steps per epoch")
    effective_batch: int = Field(4096, ge=1, description="Samples per optimizer step (after accumulation)")
    batch_size: int = Field(64, ge=1, description="Samples per forward pass")
    min_lr: float = Field(0.0, ge=0, description="Floor of the cosine decay")
    checkpoint_every: int = Field(500, ge=1, description="Steps between periodic checkpoints")
    log_every: int = Field(10, ge=1, description="Steps between loss log lines")
    min_val_improvement: float = Field(
        2.0, ge=1.0, description="Required ratio of initial to final validation loss"
    )

    @model_validator(mode="after")
    def _validate(self) -> "TrainSchedule":
        if self.warmup_epochs > self.total_epochs:
            raise ValueError(
                f"warmup_epochs ({self.warmup_epochs}) exceeds total_epochs ({self.total_epochs})"
            )
        if self.effective_batch % self.batch_size:
            raise ValueError(
                f"effective_batch {self.effective_batch} must be a multiple of batch_size {self.batch_size}"
            )
        return self

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.effective_batch / 256

    @property
    def accumulation_steps(self) -> int:
        return self.effective_batch // self.batch_size

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @classmethod
    def desk(cls, **overrides) -> "TrainSchedule":
        values = dict(
            base_lr=2e-3, warmup_epochs=2, total_epochs=40, steps_per_epoch=100,
            effective_batch=32, batch_size=32, checkpoint_every=500,
        )
        return cls(**{**values, **overrides})

    @classmethod
    def joint(cls, **overrides) -> "TrainSchedule":
        # Peak lr 1.875e-5 at batch 32, warmup over a tenth of training
        values = dict(
            base_lr=1.5e-4, warmup_epochs=10, total_epochs=100, steps_per_epoch=100,
            effective_batch=32, batch_size=32,
        )
        return cls(**{**values, **overrides})
