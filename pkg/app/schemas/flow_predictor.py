"""
Flow-conditioned predictor configuration, sparse conditioning and joint
training state.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import torch
from pydantic import BaseModel, Field, model_validator

from app.schemas.patchwork import PatchGrid
from app.schemas.predictor import expand_preset


class LayerSpec(BaseModel):
    """
    Attention pattern of one two-stream layer.

    Stream 1 carries frame-1 RGB tokens, stream 2 carries the sparse
    flow+RGB conditioning. `cross_2_to_1` moves information from stream 2
    into stream 1 (stream 1 queries stream 2), `cross_1_to_2` the reverse.
    """

    self_1: bool = True
    self_2: bool = False
    cross_1_to_2: bool = False
    cross_2_to_1: bool = False

    @classmethod
    def full(cls) -> "LayerSpec":
        return cls(self_1=True, self_2=True, cross_1_to_2=True, cross_2_to_1=True)

    @classmethod
    def stream1(cls) -> "LayerSpec":
        return cls()

    @classmethod
    def stream1_reads_2(cls) -> "LayerSpec":
        return cls(self_1=True, cross_2_to_1=True)

    @property
    def touches_stream2(self) -> bool:
        return self.self_2 or self.cross_1_to_2


LayerSchedule = List[LayerSpec]


def _paper_encoder() -> LayerSchedule:
    return [LayerSpec.full() if i % 4 == 0 else LayerSpec.stream1() for i in range(12)]


def _paper_decoder() -> LayerSchedule:
    return [LayerSpec.full(), LayerSpec.stream1_reads_2(), LayerSpec.stream1(), LayerSpec.stream1()]


_FLOW_PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": dict(
        height=32, width=32, patch_size=4,
        embed_dim_enc=128, heads_enc=4, embed_dim_dec=64, heads_dec=2,
        encoder_schedule=[LayerSpec.full(), LayerSpec.stream1(), LayerSpec.full(), LayerSpec.stream1()],
        decoder_schedule=[LayerSpec.full(), LayerSpec.stream1_reads_2()],
    ),
    "paper": dict(
        height=256, width=256, patch_size=8,
        embed_dim_enc=768, heads_enc=12, embed_dim_dec=768, heads_dec=12,
        encoder_schedule=_paper_encoder(),
        decoder_schedule=_paper_decoder(),
    ),
    "micro": dict(
        height=8, width=8, patch_size=4,
        embed_dim_enc=4, heads_enc=1, embed_dim_dec=4, heads_dec=1, mlp_ratio=1.0,
        encoder_schedule=[LayerSpec.full()],
        decoder_schedule=[LayerSpec.stream1_reads_2()],
    ),
}


class FlowPredictorConfig(BaseModel):
    """Two-stream flow-conditioned predictor. Positional encoding is fixed sinusoidal."""

    height: int = Field(32, ge=1, description="Input height in pixels")
    width: int = Field(32, ge=1, description="Input width in pixels")
    patch_size: int = Field(4, ge=1, description="Square patch side in pixels")
    embed_dim_enc: int = Field(128, ge=1, description="Encoder token width (both streams)")
    heads_enc: int = Field(4, ge=1, description="Encoder attention heads")
    embed_dim_dec: int = Field(64, ge=1, description="Decoder token width (both streams)")
    heads_dec: int = Field(2, ge=1, description="Decoder attention heads")
    mlp_ratio: float = Field(4.0, gt=0, description="Hidden width of block MLPs relative to token width")
    encoder_schedule: List[LayerSpec] = Field(
        default_factory=lambda: [LayerSpec.full(), LayerSpec.stream1(), LayerSpec.full(), LayerSpec.stream1()],
        description="Per-layer attention pattern of the encoder",
    )
    decoder_schedule: List[LayerSpec] = Field(
        default_factory=lambda: [LayerSpec.full(), LayerSpec.stream1_reads_2()],
        description="Per-layer attention pattern of the decoder",
    )

    @model_validator(mode="before")
    @classmethod
    def _apply_preset(cls, data: Any) -> Any:
        return expand_preset(data, _FLOW_PRESETS)

    @model_validator(mode="after")
    def _validate(self) -> "FlowPredictorConfig":
        if self.embed_dim_enc % self.heads_enc:
            raise ValueError(f"embed_dim_enc {self.embed_dim_enc} not divisible by heads_enc {self.heads_enc}")
        if self.embed_dim_dec % self.heads_dec:
            raise ValueError(f"embed_dim_dec {self.embed_dim_dec} not divisible by heads_dec {self.heads_dec}")
        if not self.encoder_schedule or not self.decoder_schedule:
            raise ValueError("Encoder and decoder schedules must each have at least one layer")
        if not any(spec.cross_2_to_1 for spec in self.encoder_schedule + self.decoder_schedule):
            raise ValueError("No layer lets stream 1 read the flow stream; conditioning would be ignored")
        PatchGrid.for_size(self.height, self.width, self.patch_size)
        return self

    @property
    def depth_enc(self) -> int:
        return len(self.encoder_schedule)

    @property
    def depth_dec(self) -> int:
        return len(self.decoder_schedule)

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid.for_size(self.height, self.width, self.patch_size)

    @classmethod
    def desk(cls, **overrides) -> "FlowPredictorConfig":
        return cls(preset="desk", **overrides)

    @classmethod
    def paper(cls, **overrides) -> "FlowPredictorConfig":
        return cls(preset="paper", **overrides)

    @classmethod
    def micro(cls, **overrides) -> "FlowPredictorConfig":
        return cls(preset="micro", **overrides)


@dataclass
class SparseFlowConditioning:
    """
    Sparse conditioning for one frame pair: one entry per distinct patch.

    flows are (drow, dcol) in pixels at input resolution and may carry
    gradients back to the probe that produced them. rgb_patches come from
    frame 1 only.
    """

    patch_indices: torch.Tensor
    flows: torch.Tensor
    rgb_patches: torch.Tensor
    grid: PatchGrid
    collisions: int = 0

    def __post_init__(self):
        n = int(self.patch_indices.shape[0])
        if self.flows.shape != (n, 2):
            raise ValueError(f"flows must be [{n}, 2], got {tuple(self.flows.shape)}")
        if self.rgb_patches.shape != (n, self.grid.patch_dim):
            raise ValueError(f"rgb_patches must be [{n}, {self.grid.patch_dim}], got {tuple(self.rgb_patches.shape)}")
        if torch.unique(self.patch_indices).numel() != n:
            raise ValueError("Conditioning patch indices must be distinct")
        if not torch.isfinite(self.flows).all():
            raise ValueError("Conditioning flows must be finite")

    @property
    def density(self) -> int:
        return int(self.patch_indices.shape[0])

    def to_dense(self):
        """(flow [P, 2], rgb [P, D], present [P]) with zeros where no entry exists."""
        P = self.grid.num_patches
        index = self.patch_indices.long()
        flow = torch.zeros(P, 2, dtype=self.flows.dtype, device=self.flows.device).index_put((index,), self.flows)
        rgb = torch.zeros(P, self.grid.patch_dim, dtype=self.rgb_patches.dtype, device=self.rgb_patches.device)
        rgb = rgb.index_put((index,), self.rgb_patches)
        present = torch.zeros(P, dtype=torch.bool, device=self.flows.device)
        present[index] = True
        return flow, rgb, present

    def shuffled(self, generator: torch.Generator) -> "SparseFlowConditioning":
        """Same patches, flows randomly permuted among entries."""
        order = torch.randperm(self.density, generator=generator)
        return SparseFlowConditioning(self.patch_indices, self.flows[order], self.rgb_patches, self.grid, self.collisions)


@dataclass
class JointTrainState:
    """
    Everything the joint bootstrap loop mutates, plus the frozen RGB predictor
    it probes and the hash that predictor must keep.
    """

    generator: torch.nn.Module
    flow_model: torch.nn.Module
    rgb_model: torch.nn.Module
    rgb_param_hash: str
    optimizer: Optional[torch.optim.Optimizer] = None
    scheduler: Optional[Any] = None
    step: int = 0
    loss_history: List[float] = field(default_factory=list)
    flow_error_history: List[Optional[float]] = field(default_factory=list)
    grad_norm_history: List[float] = field(default_factory=list)
