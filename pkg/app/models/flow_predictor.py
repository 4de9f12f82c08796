"""
Flow-conditioned two-stream predictor.

Stream 1 embeds every frame-1 RGB patch. Stream 2 embeds, for each
conditioned patch, its flow (normalised by canvas size) concatenated with
the frame-1 RGB of that patch; unconditioned patches hold a learnable mask
token. No frame-2 pixel is ever an input. The prediction is read from
stream 1.
"""

import torch
import torch.nn as nn

from app.core.logging_config import logger
from app.models.layers import TwoStreamLayer, init_weights, sincos_2d
from app.schemas.flow_predictor import FlowPredictorConfig
from app.utils.patches import patchify_images, unpatchify_images


class FlowPredictor(nn.Module):
    def __init__(self, config: FlowPredictorConfig):
        super().__init__()
        self.config = config
        self.grid = config.grid
        D_e, D_d = config.embed_dim_enc, config.embed_dim_dec

        self.rgb_embed = nn.Linear(self.grid.patch_dim, D_e)
        self.cond_embed = nn.Linear(2 + self.grid.patch_dim, D_e)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, D_e))
        self.register_buffer("pos_enc", sincos_2d(D_e, self.grid.rows, self.grid.cols)[None], persistent=False)
        self.register_buffer("pos_dec", sincos_2d(D_d, self.grid.rows, self.grid.cols)[None], persistent=False)

        self.encoder = nn.ModuleList(
            [TwoStreamLayer(spec, D_e, config.heads_enc, config.mlp_ratio) for spec in config.encoder_schedule]
        )
        self.encoder_norm_1 = nn.LayerNorm(D_e)
        self.encoder_norm_2 = nn.LayerNorm(D_e)
        self.to_decoder_1 = nn.Linear(D_e, D_d)
        self.to_decoder_2 = nn.Linear(D_e, D_d)
        self.decoder = nn.ModuleList(
            [TwoStreamLayer(spec, D_d, config.heads_dec, config.mlp_ratio) for spec in config.decoder_schedule]
        )
        self.decoder_norm = nn.LayerNorm(D_d)
        self.head = nn.Linear(D_d, self.grid.patch_dim)
        self.apply(init_weights)

    def forward(
        self,
        first: torch.Tensor,
        flow: torch.Tensor,
        rgb: torch.Tensor,
        present: torch.Tensor,
    ) -> torch.Tensor:
        """
        Args:
            first: Frame 1 [B, 3, H, W]
            flow: Dense per-patch flow [B, P, 2] in pixels (ignored where not present)
            rgb: Frame-1 patch content at conditioned patches [B, P, patch_dim]
            present: Conditioned patches [B, P] bool

        Returns:
            Predicted frame 2 [B, 3, H, W]
        """
        grid = self.grid
        if first.shape[-2:] != (grid.height, grid.width):
            raise ValueError(f"Frame {tuple(first.shape[-2:])} does not match {grid.height}x{grid.width}")
        scale = flow.new_tensor([grid.height, grid.width])
        x1 = self.rgb_embed(patchify_images(first, grid.patch_size)) + self.pos_enc
        cond = self.cond_embed(torch.cat([flow / scale, rgb], dim=-1))
        x2 = torch.where(present[..., None], cond, self.mask_token.to(cond.dtype)) + self.pos_enc

        for layer in self.encoder:
            x1, x2 = layer(x1, x2)
        x1 = self.to_decoder_1(self.encoder_norm_1(x1)) + self.pos_dec
        x2 = self.to_decoder_2(self.encoder_norm_2(x2)) + self.pos_dec
        for layer in self.decoder:
            x1, x2 = layer(x1, x2)

        patches = self.head(self.decoder_norm(x1))
        return unpatchify_images(patches, grid.patch_size, grid.rows, grid.cols)


def build_flow_predictor(config: FlowPredictorConfig, seed: int = 0) -> FlowPredictor:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = FlowPredictor(config)
    logger.info(
        f"FlowPredictor built: {sum(p.numel() for p in model.parameters()):,} parameters, "
        f"{config.depth_enc}+{config.depth_dec} layers"
    )
    return model
