"""
Transformer building blocks shared by both predictors.
"""

from typing import Optional

import torch
import torch.nn as nn
from einops import rearrange

from app.schemas.flow_predictor import LayerSpec


class MLP(nn.Module):
    def __init__(self, dim: int, hidden_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.gelu = nn.GELU()
        self.fc2 = nn.Linear(hidden_dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.gelu(self.fc1(x)))


class Attention(nn.Module):
    """Multi-head attention; self-attention when no context is given."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.to_q = nn.Linear(dim, dim)
        self.to_kv = nn.Linear(dim, dim * 2)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None) -> torch.Tensor:
        context = x if context is None else context
        q = rearrange(self.to_q(x), "b n (h d) -> b h n d", h=self.heads)
        k, v = map(
            lambda t: rearrange(t, "b n (h d) -> b h n d", h=self.heads),
            self.to_kv(context).chunk(2, dim=-1),
        )
        dots = torch.matmul(q, k.transpose(-1, -2)) * self.scale
        out = torch.matmul(dots.softmax(dim=-1), v)
        return self.to_out(rearrange(out, "b h n d -> b n (h d)"))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, max(1, int(dim * mlp_ratio)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class TwoStreamLayer(nn.Module):
    """
    One layer of the two-stream transformer.

    Self-attention runs first on each enabled stream; both cross-attention
    directions then read the post-self-attention state of the other stream.
    A stream that the layer does not touch passes through unchanged.
    """

    def __init__(self, spec: LayerSpec, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.spec = spec
        hidden = max(1, int(dim * mlp_ratio))
        self.self_1 = _Residual(dim, Attention(dim, heads)) if spec.self_1 else None
        self.self_2 = _Residual(dim, Attention(dim, heads)) if spec.self_2 else None
        self.cross_2_to_1 = _CrossResidual(dim, heads) if spec.cross_2_to_1 else None
        self.cross_1_to_2 = _CrossResidual(dim, heads) if spec.cross_1_to_2 else None
        self.mlp_1 = _Residual(dim, MLP(dim, hidden))
        self.mlp_2 = _Residual(dim, MLP(dim, hidden)) if spec.touches_stream2 else None

    def forward(self, x1: torch.Tensor, x2: torch.Tensor):
        if self.self_1 is not None:
            x1 = self.self_1(x1)
        if self.self_2 is not None:
            x2 = self.self_2(x2)
        y1 = self.cross_2_to_1(x1, x2) if self.cross_2_to_1 is not None else x1
        y2 = self.cross_1_to_2(x2, x1) if self.cross_1_to_2 is not None else x2
        y1 = self.mlp_1(y1)
        if self.mlp_2 is not None:
            y2 = self.mlp_2(y2)
        return y1, y2


class _Residual(nn.Module):
    def __init__(self, dim: int, fn: nn.Module):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fn = fn

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.fn(self.norm(x))


class _CrossResidual(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        return x + self.attn(self.norm_q(x), self.norm_kv(context))


def sincos_1d(dim: int, positions: torch.Tensor) -> torch.Tensor:
    """[N] positions -> [N, dim] sin/cos features."""
    if dim % 2:
        raise ValueError(f"Sinusoidal embedding needs an even dim, got {dim}")
    omega = torch.arange(dim // 2, dtype=torch.float64) / (dim / 2.0)
    omega = 1.0 / 10000 ** omega
    angles = positions.to(torch.float64)[:, None] * omega[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


def sincos_2d(dim: int, rows: int, cols: int) -> torch.Tensor:
    """Row-major [rows*cols, dim] table; half the channels encode row, half column."""
    if dim % 4:
        raise ValueError(f"2D sinusoidal embedding needs dim divisible by 4, got {dim}")
    r, c = torch.meshgrid(torch.arange(rows), torch.arange(cols), indexing="ij")
    emb_r = sincos_1d(dim // 2, r.reshape(-1))
    emb_c = sincos_1d(dim // 2, c.reshape(-1))
    return torch.cat([emb_r, emb_c], dim=1).float()


def init_weights(module: nn.Module) -> None:
    """Xavier-uniform linear weights, zero biases, unit LayerNorm."""
    if isinstance(module, nn.Linear):
        nn.init.xavier_uniform_(module.weight)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)
