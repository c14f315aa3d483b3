"""Frozen teacher features: a seeded stub encoder or precomputed URFT files.

URFT layout (little-endian)::

    magic   4s   b"URFT"
    version u16  1
    count   u32  number of samples
    N       u32  tokens per sample (row-major)
    D       u32  feature width
    dtype   u8   0 = float32
    data         count * N * D values
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .blocks import TransformerBlock
from .geometry import TokenGrid, patchify
from .model import sincos_pos_embed
from .numerics import SeededRng

URFT_MAGIC = b"URFT"
URFT_VERSION = 1
_HEADER = struct.Struct("<4sHIIIB")
_DTYPES = {0: np.dtype("<f4")}


class FeatureFormatError(ValueError):
    pass


@dataclass(frozen=True)
class StubEncoderConfig:
    depth: int = 4
    channels: int = 64
    heads: int = 4
    patch_size: int = 2
    seed: int = 1234
    in_channels: int = 4


class StubEncoder(nn.Module):
    """Small isotropic pre-norm ViT with frozen random weights.

    Reuses :class:`TransformerBlock` with a constant conditioning vector and
    modulation fixed to shift = scale = 0, gate = 1.
    """

    def __init__(self, config: StubEncoderConfig):
        super().__init__()
        self.config = config
        c = config.channels
        p = config.patch_size
        self.embed = nn.Linear(config.in_channels * p * p, c)
        self.blocks = nn.ModuleList(
            TransformerBlock(c, config.heads, use_swiglu=False, use_rope=False)
            for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(c, elementwise_affine=False, eps=1e-6)
        gen = SeededRng(config.seed).spawn("stub-encoder").generator
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight, generator=gen)
                nn.init.zeros_(m.bias)
        with torch.no_grad():
            for blk in self.blocks:
                lin = blk.adaLN[1]
                lin.weight.zero_()
                lin.bias.zero_()
                lin.bias.view(6, c)[2] = 1.0
                lin.bias.view(6, c)[5] = 1.0
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, x: torch.Tensor) -> TokenGrid:
        p = self.config.patch_size
        if x.shape[1] != self.config.in_channels or x.shape[2] % p or x.shape[3] % p:
            raise ValueError(f"input {tuple(x.shape)} incompatible with stub patch {p}")
        x = x.to(self.embed.weight.dtype)
        h = patchify(x, p, self.embed)
        if h.height != h.width:
            raise ValueError("stub encoder expects square inputs")
        h = h.with_data(h.data + sincos_pos_embed(self.config.channels, h.height).to(h.data.dtype))
        cond = torch.zeros(h.batch, self.config.channels, dtype=h.data.dtype)
        for blk in self.blocks:
            h = blk(h, cond)
        return h.with_data(self.norm(h.data))


@dataclass
class TeacherFeatures:
    """Per-sample teacher token features, ``features[i]`` shaped ``[N, D]``."""

    features: torch.Tensor
    height: int
    width: int
    provenance: str
    normalized: bool = False

    def __post_init__(self):
        if self.features.dim() != 3 or self.features.shape[1] != self.height * self.width:
            raise ValueError("teacher features must be [count, height*width, D]")
        if not torch.isfinite(self.features).all():
            raise ValueError("teacher features contain non-finite values")

    def __len__(self):
        return self.features.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    def grid(self, indices: torch.Tensor | list[int] | int) -> TokenGrid:
        if isinstance(indices, int):
            indices = [indices]
        idx = torch.as_tensor(indices, dtype=torch.long)
        if idx.numel() and (idx.min() < 0 or idx.max() >= len(self)):
            raise IndexError(f"sample index out of range for store of {len(self)}")
        return TokenGrid(self.features[idx], self.height, self.width)

    def standardized(self) -> "TeacherFeatures":
        """Per-token zero mean / unit variance over the feature width."""
        if self.normalized:
            return self
        f = self.features
        f = (f - f.mean(-1, keepdim=True)) / f.std(-1, unbiased=False, keepdim=True).clamp_min(1e-6)
        return TeacherFeatures(f, self.height, self.width, self.provenance, normalized=True)

    def validate(self, num_tokens: int, dim: int | None = None):
        if self.num_tokens != num_tokens:
            raise FeatureFormatError(
                f"teacher has N={self.num_tokens} tokens, run expects {num_tokens}")
        if dim is not None and self.dim != dim:
            raise FeatureFormatError(f"teacher has D={self.dim}, run expects {dim}")


def encode(x_star: torch.Tensor, config: StubEncoderConfig | StubEncoder,
           batch_size: int = 256) -> TeacherFeatures:
    encoder = config if isinstance(config, StubEncoder) else StubEncoder(config)
    grids = [encoder(x_star[i:i + batch_size]) for i in range(0, x_star.shape[0], batch_size)]
    feats = torch.cat([g.data for g in grids]).to(torch.float32)
    return TeacherFeatures(feats, grids[0].height, grids[0].width, "stub")


def save_features(path: str | os.PathLike, feats: TeacherFeatures | torch.Tensor):
    data = feats.features if isinstance(feats, TeacherFeatures) else feats
    arr = np.ascontiguousarray(data.detach().cpu().numpy(), dtype="<f4")
    count, n, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(URFT_MAGIC, URFT_VERSION, count, n, d, 0))
        fh.write(arr.tobytes())


def load_features(path: str | os.PathLike, num_tokens: int | None = None,
                  dim: int | None = None) -> TeacherFeatures:
    """Read a URFT file; the token grid is taken to be square."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"teacher feature file not found: {path}")
    size = path.stat().st_size
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header")
    magic, version, count, n, d, code = _HEADER.unpack(head)
    if magic != URFT_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}, expected {URFT_MAGIC!r}")
    if version != URFT_VERSION:
        raise FeatureFormatError(f"{path}: unsupported URFT version {version}")
    if code not in _DTYPES:
        raise FeatureFormatError(f"{path}: unknown dtype code {code}")
    dtype = _DTYPES[code]
    expected = _HEADER.size + count * n * d * dtype.itemsize
    if size != expected:
        raise FeatureFormatError(f"{path}: size {size} bytes, header implies {expected} (truncated?)")
    side = math.isqrt(n)
    if side * side != n:
        raise FeatureFormatError(f"{path}: N={n} is not a square token grid")
    arr = np.memmap(path, dtype=dtype, mode="r", offset=_HEADER.size, shape=(count, n, d))
    feats = TeacherFeatures(torch.from_numpy(np.array(arr)), side, side, "file")
    if num_tokens is not None:
        feats.validate(num_tokens, dim)
    return feats
