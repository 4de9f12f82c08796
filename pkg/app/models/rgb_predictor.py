"""
RGB-conditioned two-frame predictor.

Frame 1 is fully tokenized, frame 2 contributes only its visible patches;
masked positions (in either frame) carry a learnable mask token and stay in
the encoder sequence. The decoder predicts every frame-2 patch.
"""

import hashlib
from typing import Protocol, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from app.core.logging_config import logger
from app.models.layers import TransformerBlock, init_weights, sincos_1d, sincos_2d
from app.schemas.patchwork import MaskedInput, PatchGrid
from app.schemas.predictor import PredictorConfig
from app.utils.patches import patchify_images, unpatchify_images


class NextFramePredictor(Protocol):
    """Anything the probe can query: the trained predictor or the oracle stub."""

    grid: PatchGrid
    token_dim: int

    def __call__(self, first: torch.Tensor, masked: MaskedInput) -> torch.Tensor: ...

    def encode(self, first: torch.Tensor, masked: MaskedInput) -> torch.Tensor: ...

    def forward_with_tokens(
        self, first: torch.Tensor, masked: MaskedInput
    ) -> Tuple[torch.Tensor, torch.Tensor]: ...


class RgbPredictor(nn.Module):
    def __init__(self, config: PredictorConfig):
        super().__init__()
        self.config = config
        self.grid = config.grid
        self.token_dim = config.embed_dim_enc
        self.frozen = False
        P = self.grid.num_patches

        self.patch_embed = nn.Linear(self.grid.patch_dim, config.embed_dim_enc)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, config.embed_dim_enc))
        self.encoder = nn.ModuleList(
            [TransformerBlock(config.embed_dim_enc, config.heads_enc, config.mlp_ratio) for _ in range(config.depth_enc)]
        )
        self.encoder_norm = nn.LayerNorm(config.embed_dim_enc)

        self.decoder_embed = nn.Linear(config.embed_dim_enc, config.embed_dim_dec)
        self.decoder = nn.ModuleList(
            [TransformerBlock(config.embed_dim_dec, config.heads_dec, config.mlp_ratio) for _ in range(config.depth_dec)]
        )
        self.decoder_norm = nn.LayerNorm(config.embed_dim_dec)
        self.head = nn.Linear(config.embed_dim_dec, self.grid.patch_dim)

        if config.pos_embed == "learnable":
            self.pos_embed = nn.Parameter(torch.zeros(1, 2 * P, config.embed_dim_enc))
            self.decoder_pos_embed = nn.Parameter(torch.zeros(1, 2 * P, config.embed_dim_dec))
        else:
            self.register_buffer("pos_embed", spacetime_sincos(config.embed_dim_enc, self.grid), persistent=False)
            self.register_buffer("decoder_pos_embed", spacetime_sincos(config.embed_dim_dec, self.grid), persistent=False)

        self.apply(init_weights)
        if config.pos_embed == "learnable":
            nn.init.trunc_normal_(self.pos_embed, std=0.02)
            nn.init.trunc_normal_(self.decoder_pos_embed, std=0.02)

    def freeze(self) -> "RgbPredictor":
        """Stop all parameter updates; inputs still receive gradients."""
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self.eval()

    def train(self, mode: bool = True) -> "RgbPredictor":
        # A frozen predictor never leaves inference mode
        return super().train(mode and not self.frozen)

    def _positional(self, table: torch.Tensor, grid: PatchGrid, dim: int) -> torch.Tensor:
        if grid == self.grid:
            return table
        if not self.config.interpolate_pos_embed:
            raise ValueError(
                f"Input grid {grid.rows}x{grid.cols} does not match the positional table "
                f"{self.grid.rows}x{self.grid.cols}; enable interpolate_pos_embed to resample"
            )
        if self.config.pos_embed == "sinusoidal":
            return spacetime_sincos(dim, grid).to(table)
        return resample_spacetime_table(table, self.grid, grid)

    def encode(self, first: torch.Tensor, masked: MaskedInput) -> torch.Tensor:
        """Last encoder block output [B, 2P, embed_dim_enc]: frame-1 tokens then frame-2 tokens."""
        grid = masked.grid
        if first.shape[-2:] != (grid.height, grid.width):
            raise ValueError(f"Frame {tuple(first.shape[-2:])} does not match mask grid {grid.height}x{grid.width}")
        t1 = self.patch_embed(patchify_images(first, grid.patch_size))
        t2 = self.patch_embed(masked.second_patches)
        token = self.mask_token.to(t1.dtype)
        t1 = torch.where(masked.visible_f1[..., None], t1, token)
        t2 = torch.where(masked.visible_f2[..., None], t2, token)
        x = torch.cat([t1, t2], dim=1) + self._positional(self.pos_embed, grid, self.config.embed_dim_enc)
        for block in self.encoder:
            x = block(x)
        return self.encoder_norm(x)

    def decode(self, tokens: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
        """Predicted frame-2 image [B, 3, H, W]."""
        x = self.decoder_embed(tokens) + self._positional(self.decoder_pos_embed, grid, self.config.embed_dim_dec)
        for block in self.decoder:
            x = block(x)
        patches = self.head(self.decoder_norm(x))[:, grid.num_patches:]
        return unpatchify_images(patches, grid.patch_size, grid.rows, grid.cols)

    def forward_with_tokens(self, first: torch.Tensor, masked: MaskedInput) -> Tuple[torch.Tensor, torch.Tensor]:
        tokens = self.encode(first, masked)
        return self.decode(tokens, masked.grid), tokens

    def forward(self, first: torch.Tensor, masked: MaskedInput) -> torch.Tensor:
        return self.forward_with_tokens(first, masked)[0]


def spacetime_sincos(dim: int, grid: PatchGrid) -> torch.Tensor:
    """Fixed [1, 2P, dim] table: 2D spatial sincos plus a per-frame temporal sincos."""
    spatial = sincos_2d(dim, grid.rows, grid.cols)
    temporal = sincos_1d(dim, torch.arange(2)).float()
    return torch.cat([spatial + temporal[0], spatial + temporal[1]], dim=0).unsqueeze(0)


def resample_spacetime_table(table: torch.Tensor, old: PatchGrid, new: PatchGrid) -> torch.Tensor:
    """Bicubic resampling of a [1, 2P, D] table, frame by frame."""
    D = table.shape[-1]
    frames = table.reshape(2, old.rows, old.cols, D).permute(0, 3, 1, 2)
    resized = F.interpolate(frames, size=(new.rows, new.cols), mode="bicubic", align_corners=False)
    return resized.permute(0, 2, 3, 1).reshape(1, 2 * new.num_patches, D)


def parameter_hash(model: nn.Module) -> str:
    """sha256 over the state dict in sorted key order."""
    digest = hashlib.sha256()
    for key, value in sorted(model.state_dict().items()):
        digest.update(key.encode("utf-8"))
        digest.update(np.ascontiguousarray(value.detach().cpu().numpy()).tobytes())
    return digest.hexdigest()


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_rgb_predictor(config: PredictorConfig, seed: int = 0) -> RgbPredictor:
    """Seeded construction so two builds with one seed are identical."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = RgbPredictor(config)
    logger.info(f"RgbPredictor built: {count_parameters(model):,} parameters, grid {config.grid.rows}x{config.grid.cols}")
    return model
