from typing import Tuple

import numpy as np
import torch
import torch.nn as nn

from app.schemas.probe import GaussianPerturbationParams


class PerturbationGenerator(nn.Module):
    """
    MLP mapping a frame-1 patch token to K colored Gaussians.

    Raw outputs are squashed so every parameter stays inside its bounds with
    nonzero gradient: tanh for amplitudes and centre offsets, a scaled
    sigmoid for the standard deviation.
    """

    def __init__(
        self,
        token_dim: int,
        num_gaussians: int = 1,
        hidden_dim: int = 256,
        bounds: Tuple[float, float, float, float] = (1.0, 4.0, 0.5, 8.0),
    ):
        super().__init__()
        self.token_dim = token_dim
        self.num_gaussians = num_gaussians
        self.amplitude_max, self.offset_max, self.sigma_min, self.sigma_max = bounds
        if self.sigma_max <= self.sigma_min:
            raise ValueError(f"sigma_max ({self.sigma_max}) must exceed sigma_min ({self.sigma_min})")
        self.mlp = nn.Sequential(
            nn.Linear(token_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, num_gaussians * 6),
        )
        self._init_output()

    def _init_output(self) -> None:
        last = self.mlp[-1]
        nn.init.normal_(last.weight, std=0.01)
        bias = torch.zeros(self.num_gaussians, 6)
        # Start from a visible perturbation of alternating sign per channel
        bias[:, :3] = torch.tensor([1.0, -1.0, 1.0]) * float(np.arctanh(0.5))
        with torch.no_grad():
            last.bias.copy_(bias.reshape(-1))

    @property
    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, tokens: torch.Tensor) -> GaussianPerturbationParams:
        raw = self.mlp(tokens).reshape(*tokens.shape[:-1], self.num_gaussians, 6)
        amplitude = self.amplitude_max * torch.tanh(raw[..., :3])
        offset = self.offset_max * torch.tanh(raw[..., 3:5])
        sigma = self.sigma_min + (self.sigma_max - self.sigma_min) * torch.sigmoid(raw[..., 5])
        return GaussianPerturbationParams(amplitude=amplitude, offset=offset, sigma=sigma)
