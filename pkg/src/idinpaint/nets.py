"""Shared network building blocks and deterministic parameter initialization.

Initialization never touches torch's global RNG: every parameter is filled
from its own generator derived from (seed parts..., parameter name), so
model construction is reproducible and independent of creation order.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .artifacts import torch_generator


def seeded_init(module: nn.Module, *seed_parts: int | str) -> None:
    """Re-initialize all parameters of a module deterministically.

    Weights with >= 2 dims get fan-in uniform init, 1-d weights (norm
    scales) are set to one, biases to zero.
    """
    with torch.no_grad():
        for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            if name.endswith("weight") and p.ndim >= 2:
                fan_in = p.shape[1:].numel()
                bound = 1.0 / math.sqrt(fan_in)
                g = torch_generator(*seed_parts, name)
                p.uniform_(-bound, bound, generator=g)
            elif name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()


def freeze(module: nn.Module) -> nn.Module:
    """Stop gradient flow into a module and switch it to eval mode."""
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


def norm(channels: int) -> nn.GroupNorm:
    groups = channels
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            groups = g
            break
    return nn.GroupNorm(groups, channels)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10_000.0) -> torch.Tensor:
    """Sinusoidal timestep embedding: [B] integer timesteps -> [B, dim] features."""
    t = torch.as_tensor(t, dtype=torch.float32)
    if t.ndim == 0:
        t = t[None]
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class TimeMLP(nn.Module):
    """Maps raw sinusoidal timestep features to the conditioning width."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, out_dim), nn.SiLU(),
                                 nn.Linear(out_dim, out_dim))

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        return self.net(emb)


class ResBlock(nn.Module):
    """Two 3x3 convs with group norm and an additive timestep term."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class Downsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        x = torch.nn.functional.interpolate(x, scale_factor=2, mode="nearest")
        return self.conv(x)


class ZeroConv2d(nn.Module):
    """1x1 projection whose weight and bias start at exactly zero.

    Until the first optimizer update its output is identically zero, so an
    additive injection through it leaves the host network untouched.
    """

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 1)
        self.reset_to_zero()

    def reset_to_zero(self) -> None:
        with torch.no_grad():
            self.conv.weight.zero_()
            self.conv.bias.zero_()

    def is_zero(self) -> bool:
        return bool((self.conv.weight == 0).all() and (self.conv.bias == 0).all())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)
