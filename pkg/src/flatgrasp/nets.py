"""Small vision and sequence blocks shared by the learned policies."""

from __future__ import annotations

import math

import torch
from torch import nn


def sinusoidal_embedding(steps: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Classic sin/cos position code for integer step indices.

    steps: (B,) integer tensor. Returns (B, dim).
    """
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=dtype) / max(half, 1)
    )
    args = steps.to(dtype)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class SpatialSoftmax(nn.Module):
    """Softmax-weighted expected pixel coordinate per feature channel.

    Input (B, C, H, W), output (B, 2C) laid out as (x_0, y_0, x_1, y_1, ...)
    with coordinates in [-1, 1]; x grows with width index, y with height.
    """

    def __init__(self, height: int, width: int):
        super().__init__()
        xs = torch.linspace(-1.0, 1.0, width)
        ys = torch.linspace(-1.0, 1.0, height)
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        self.register_buffer("grid_x", gx.reshape(1, 1, -1))
        self.register_buffer("grid_y", gy.reshape(1, 1, -1))

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        b, c, h, w = feat.shape
        attn = torch.softmax(feat.reshape(b, c, h * w), dim=-1)
        ex = (attn * self.grid_x).sum(-1)
        ey = (attn * self.grid_y).sum(-1)
        return torch.stack([ex, ey], dim=-1).reshape(b, 2 * c)


class ConvEncoder(nn.Module):
    """Three stride-2 conv stages with group norm, pooled to keypoints."""

    def __init__(self, out_dim: int, in_channels: int = 3,
                 channels: tuple[int, ...] = (12, 24, 24), img_size: int = 64):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_channels
        for ch in channels:
            layers.append(nn.Conv2d(prev, ch, kernel_size=3, stride=2, padding=1))
            layers.append(nn.GroupNorm(4, ch))
            layers.append(nn.SiLU())
            prev = ch
        self.stages = nn.Sequential(*layers)
        side = img_size // (2 ** len(channels))
        if side < 1:
            raise ValueError("too many conv stages for image size")
        self.pool = SpatialSoftmax(side, side)
        self.head = nn.Linear(2 * channels[-1], out_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """images: (B, C, H, W) float in [0, 1] -> (B, out_dim)."""
        return self.head(self.pool(self.stages(images)))


class TokenTransformer(nn.Module):
    """Full-attention encoder stack over a short token sequence."""

    def __init__(self, width: int = 128, heads: int = 4, layers: int = 4):
        super().__init__()
        layer = nn.TransformerEncoderLayer(
            d_model=width, nhead=heads, dim_feedforward=4 * width,
            dropout=0.0, activation="gelu", batch_first=True, norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(
            layer, num_layers=layers, enable_nested_tensor=False
        )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.encoder(tokens)
