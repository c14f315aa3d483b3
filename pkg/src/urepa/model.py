"""Three-stage U-Net diffusion transformer (encoder, downsampled middle, decoder).

Turning off skips and downsampling collapses it to an isotropic SiT stack.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn

from .blocks import (
    Downsample,
    LabelEmbedder,
    SkipMerge,
    TimestepEmbedder,
    TransformerBlock,
    Upsample,
    modulate,
)
from .geometry import RopeTable, TokenGrid, patchify, unpatchify
from .numerics import SeededRng

STAGE_NAMES = ("encoder", "middle", "decoder")


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 2
    channels: int = 128
    heads: int = 4
    blocks_per_stage: tuple[int, int, int] = (2, 2, 2)
    use_skips: bool = True
    use_downsampling: bool = True
    use_rope: bool = True
    use_swiglu: bool = True
    tap_depth: int | None = None
    num_classes: int = 10
    input_size: int = 16
    in_channels: int = 4
    mlp_ratio: float = 4.0
    class_dropout: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        if len(self.blocks_per_stage) != 3 or min(self.blocks_per_stage) < 1:
            raise ValueError("blocks_per_stage needs three entries, each >= 1")
        if self.input_size % self.patch_size:
            raise ValueError(f"input_size {self.input_size} not divisible by patch {self.patch_size}")
        if self.use_downsampling and self.grid_size % 2:
            raise ValueError(f"token grid {self.grid_size} must be even to downsample")
        if self.channels % self.heads:
            raise ValueError("channels must be divisible by heads")
        if self.use_rope and (self.channels // self.heads) % 4:
            raise ValueError("head dim must be divisible by 4 for 2D RoPE")
        if self.tap_depth is not None and not 1 <= self.tap_depth <= self.total_blocks:
            raise ValueError(f"tap_depth {self.tap_depth} outside [1, {self.total_blocks}]")

    @property
    def grid_size(self) -> int:
        return self.input_size // self.patch_size

    @property
    def total_blocks(self) -> int:
        return sum(self.blocks_per_stage)

    @property
    def resolved_tap(self) -> int:
        return default_tap(self) if self.tap_depth is None else self.tap_depth


class StageInfo(NamedTuple):
    stage: int
    name: str
    height: int
    width: int


def default_tap(config: ModelConfig) -> int:
    """Middle block of the middle stage."""
    enc, mid, _ = config.blocks_per_stage
    return enc + math.ceil(mid / 2)


def depth_to_stage(config: ModelConfig, depth: int) -> StageInfo:
    """Map a 1-based global block index to its stage and token-grid dims."""
    if not 1 <= depth <= config.total_blocks:
        raise ValueError(f"depth {depth} outside [1, {config.total_blocks}]")
    enc, mid, _ = config.blocks_per_stage
    stage = 0 if depth <= enc else 1 if depth <= enc + mid else 2
    g = config.grid_size
    if stage == 1 and config.use_downsampling:
        g //= 2
    return StageInfo(stage, STAGE_NAMES[stage], g, g)


@dataclass
class ForwardOutput:
    velocity: torch.Tensor
    tap_hidden: TokenGrid


def sincos_pos_embed(channels: int, grid: int) -> torch.Tensor:
    """Fixed 2D sin-cos position table, ``[grid*grid, channels]``, row-major."""
    def one_axis(dim, pos):
        omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
        out = np.einsum("m,d->md", pos, omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    rows, cols = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64),
                             indexing="ij")
    emb = np.concatenate([one_axis(channels // 2, rows.reshape(-1)),
                          one_axis(channels // 2, cols.reshape(-1))], axis=1)
    return torch.from_numpy(emb).float()


class FinalLayer(nn.Module):
    def __init__(self, channels: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels, elementwise_affine=False, eps=1e-6)
        self.linear = nn.Linear(channels, out_dim)
        self.adaLN = nn.Sequential(nn.SiLU(), nn.Linear(channels, 2 * channels))

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift, scale = self.adaLN(c).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))


class UNetSiT(nn.Module):
    """Velocity-prediction transformer with an optional single down/up transition."""

    def __init__(self, config: ModelConfig, rng: SeededRng | None = None):
        super().__init__()
        self.config = config
        c = config.channels
        p = config.patch_size
        enc, mid, dec = config.blocks_per_stage
        self.x_embedder = nn.Linear(config.in_channels * p * p, c)
        self.t_embedder = TimestepEmbedder(c)
        self.y_embedder = LabelEmbedder(config.num_classes, c)

        def make_blocks(n):
            return nn.ModuleList(
                TransformerBlock(c, config.heads, config.mlp_ratio,
                                 use_swiglu=config.use_swiglu, use_rope=config.use_rope)
                for _ in range(n)
            )

        self.encoder = make_blocks(enc)
        self.middle = make_blocks(mid)
        self.decoder = make_blocks(dec)
        if config.use_downsampling:
            self.down = Downsample(c)
            self.up = Upsample(c)
        if config.use_skips:
            # decoder block j receives encoder block (enc - 1 - j)
            self.skips = nn.ModuleList(SkipMerge(c) for _ in range(min(enc, dec)))
        self.final = FinalLayer(c, p * p * config.in_channels)

        g = config.grid_size
        self.rope = RopeTable(g, g, c // config.heads) if config.use_rope else None
        if not config.use_rope:
            self.register_buffer("pos_embed", sincos_pos_embed(c, g), persistent=False)
        self.initialize(rng if rng is not None else SeededRng(0))

    def initialize(self, rng: SeededRng):
        gen = rng.generator
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight, generator=gen)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.y_embedder.table.weight, std=0.02, generator=gen)
        for lin in (self.t_embedder.mlp[0], self.t_embedder.mlp[2]):
            nn.init.normal_(lin.weight, std=0.02, generator=gen)
        for blk in self.blocks():
            blk.zero_gates()
        nn.init.zeros_(self.final.adaLN[1].weight)
        nn.init.zeros_(self.final.adaLN[1].bias)
        nn.init.zeros_(self.final.linear.weight)
        nn.init.zeros_(self.final.linear.bias)

    def blocks(self) -> list[TransformerBlock]:
        return [*self.encoder, *self.middle, *self.decoder]

    def embed_time(self, t: torch.Tensor) -> torch.Tensor:
        return self.t_embedder(t)

    def condition(self, t: torch.Tensor, y: torch.Tensor | None, cfg_drop: bool = False,
                  rng: SeededRng | None = None) -> torch.Tensor:
        b = t.shape[0]
        if y is None:
            y = torch.full((b,), self.y_embedder.null_label, dtype=torch.long)
        elif cfg_drop and self.config.class_dropout > 0:
            if rng is None:
                raise ValueError("cfg_drop requires an rng")
            drop = rng.uniform((b,)) < self.config.class_dropout
            y = torch.where(drop, torch.full_like(y, self.y_embedder.null_label), y)
        return self.embed_time(t) + self.y_embedder(y)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, y: torch.Tensor | None = None,
                cfg_drop: bool = False, rng: SeededRng | None = None,
                tap_depth: int | None = None) -> ForwardOutput:
        cfg = self.config
        if z_t.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
            raise ValueError(f"input shape {tuple(z_t.shape)} does not match config")
        tap = cfg.resolved_tap if tap_depth is None else tap_depth
        if not 1 <= tap <= cfg.total_blocks:
            raise ValueError(f"tap_depth {tap} outside [1, {cfg.total_blocks}]")
        t = t.to(z_t.dtype).expand(z_t.shape[0]) if t.dim() == 0 else t.to(z_t.dtype)
        c = self.condition(t, y, cfg_drop, rng)

        h = patchify(z_t, cfg.patch_size, self.x_embedder)
        if not cfg.use_rope:
            h = h.with_data(h.data + self.pos_embed.to(h.data.dtype))

        depth = 0
        tap_hidden = None

        def run(block, x):
            nonlocal depth, tap_hidden
            x = block(x, c, self.rope)
            depth += 1
            if depth == tap:
                tap_hidden = x
            return x

        shallow = []
        for blk in self.encoder:
            h = run(blk, h)
            shallow.append(h)
        if cfg.use_downsampling:
            h = self.down(h)
        for blk in self.middle:
            h = run(blk, h)
        if cfg.use_downsampling:
            h = self.up(h)
        for j, blk in enumerate(self.decoder):
            if cfg.use_skips and j < len(self.skips):
                h = self.skips[j](h, shallow[len(self.encoder) - 1 - j])
            h = run(blk, h)

        out = h.with_data(self.final(h.data, c))
        velocity = unpatchify(out, cfg.patch_size, cfg.in_channels)
        return ForwardOutput(velocity, tap_hidden)

    def velocity(self, z_t: torch.Tensor, t: torch.Tensor, y: torch.Tensor | None) -> torch.Tensor:
        return self.forward(z_t, t, y).velocity


def attention_weight_count(model: UNetSiT) -> int:
    return sum(blk.attn.qkv.weight.numel() + blk.attn.proj.weight.numel() for blk in model.blocks())


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
