"""Transformer building blocks with AdaLN time conditioning."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import RopeTable, TokenGrid, apply_rope, pixel_shuffle, pixel_unshuffle


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


def timestep_frequencies(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of scalar times, ``[B] -> [B, dim]``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class TimestepEmbedder(nn.Module):
    def __init__(self, channels: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(
            nn.Linear(freq_dim, channels),
            nn.SiLU(),
            nn.Linear(channels, channels),
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        # t in [0, 1]; scaled so the low frequencies still separate nearby times
        freq = timestep_frequencies(t * 1000, self.freq_dim).to(self.mlp[0].weight.dtype)
        return self.mlp(freq)


class LabelEmbedder(nn.Module):
    """Class embedding table with one extra row for the unconditional (null) label."""

    def __init__(self, num_classes: int, channels: int):
        super().__init__()
        self.num_classes = num_classes
        self.table = nn.Embedding(num_classes + 1, channels)

    @property
    def null_label(self) -> int:
        return self.num_classes

    def forward(self, labels: torch.Tensor) -> torch.Tensor:
        return self.table(labels)


class Attention(nn.Module):
    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = channels // heads
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, height: int, width: int,
                rope: RopeTable | None = None) -> torch.Tensor:
        b, n, c = x.shape
        qkv = self.qkv(x).view(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        if rope is not None:
            q = apply_rope(q, rope, height, width)
            k = apply_rope(k, rope, height, width)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, n, c))


class SwiGLU(nn.Module):
    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.gate = nn.Linear(channels, hidden)
        self.up = nn.Linear(channels, hidden)
        self.down = nn.Linear(hidden, channels)

    def forward(self, x):
        return self.down(F.silu(self.gate(x)) * self.up(x))


class GeluMLP(nn.Module):
    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


class TransformerBlock(nn.Module):
    """Pre-norm attention + feed-forward block, modulated by a conditioning vector.

    ``adaLN`` maps the conditioning vector to shift/scale/gate for both
    branches (``6 * channels`` outputs). Gates start at zero, so a freshly
    initialised block is the identity.
    """

    def __init__(self, channels: int, heads: int, mlp_ratio: float = 4.0,
                 use_swiglu: bool = True, use_rope: bool = True):
        super().__init__()
        self.channels = channels
        self.use_rope = use_rope
        self.norm1 = nn.LayerNorm(channels, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(channels, heads)
        self.norm2 = nn.LayerNorm(channels, elementwise_affine=False, eps=1e-6)
        if use_swiglu:
            self.mlp = SwiGLU(channels, int(2 * mlp_ratio * channels / 3))
        else:
            self.mlp = GeluMLP(channels, int(mlp_ratio * channels))
        self.adaLN = nn.Sequential(nn.SiLU(), nn.Linear(channels, 6 * channels))

    def zero_gates(self):
        nn.init.zeros_(self.adaLN[1].weight)
        nn.init.zeros_(self.adaLN[1].bias)

    def forward(self, x: TokenGrid, t_embed: torch.Tensor,
                rope: RopeTable | None = None) -> TokenGrid:
        if x.channels != self.channels:
            raise ValueError(f"block expects {self.channels} channels, got {x.channels}")
        h = x.data
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = self.adaLN(t_embed).chunk(6, dim=-1)
        attn_in = modulate(self.norm1(h), shift_a, scale_a)
        h = h + gate_a.unsqueeze(1) * self.attn(
            attn_in, x.height, x.width, rope if self.use_rope else None)
        h = h + gate_m.unsqueeze(1) * self.mlp(modulate(self.norm2(h), shift_m, scale_m))
        return x.with_data(h)


class SkipMerge(nn.Module):
    """Concatenate ``[deep, shallow]`` along channels and map back to ``channels``."""

    def __init__(self, channels: int):
        super().__init__()
        self.linear = nn.Linear(2 * channels, channels)

    def forward(self, deep: TokenGrid, shallow: TokenGrid) -> TokenGrid:
        if (deep.batch, deep.height, deep.width) != (shallow.batch, shallow.height, shallow.width):
            raise ValueError(
                f"skip spatial mismatch: {deep.height}x{deep.width} vs {shallow.height}x{shallow.width}"
            )
        if deep.channels != shallow.channels:
            raise ValueError("skip channel mismatch")
        return deep.with_data(self.linear(torch.cat([deep.data, shallow.data], dim=-1)))


class Downsample(nn.Module):
    """Halve the grid: 2x2 pixel-unshuffle, then a linear map ``4C -> C``."""

    def __init__(self, channels: int):
        super().__init__()
        self.linear = nn.Linear(4 * channels, channels)

    def forward(self, x: TokenGrid) -> TokenGrid:
        if x.height % 2 or x.width % 2:
            raise ValueError(f"cannot downsample odd grid {x.height}x{x.width}")
        g = pixel_unshuffle(x, 2)
        return g.with_data(self.linear(g.data))


class Upsample(nn.Module):
    """Double the grid: linear map ``C -> 4C``, then 2x2 pixel-shuffle."""

    def __init__(self, channels: int):
        super().__init__()
        self.linear = nn.Linear(channels, 4 * channels)

    def forward(self, x: TokenGrid) -> TokenGrid:
        return pixel_shuffle(x.with_data(self.linear(x.data)), 2)
