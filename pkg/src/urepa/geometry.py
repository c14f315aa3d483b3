"""Token-grid bookkeeping: patch embedding, scale changes, 2D rotary positions.

Tokens are always stored row-major: token ``n`` sits at row ``n // width``,
column ``n % width``. Teacher features use the same order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch


@dataclass(frozen=True)
class TokenGrid:
    """A batch of token maps, ``data`` shaped ``[batch, height*width, channels]``."""

    data: torch.Tensor
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("grid height and width must be >= 1")
        if self.data.dim() != 3 or self.data.shape[1] != self.height * self.width:
            raise ValueError(
                f"data shape {tuple(self.data.shape)} does not match a "
                f"{self.height}x{self.width} grid"
            )

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def num_tokens(self) -> int:
        return self.height * self.width

    def with_data(self, data: torch.Tensor) -> "TokenGrid":
        return TokenGrid(data, self.height, self.width)

    def spatial(self) -> torch.Tensor:
        """View as ``[batch, height, width, channels]``."""
        return self.data.view(self.batch, self.height, self.width, self.channels)

    @classmethod
    def from_spatial(cls, x: torch.Tensor) -> "TokenGrid":
        b, h, w, c = x.shape
        return cls(x.reshape(b, h * w, c), h, w)


def patchify(image: torch.Tensor, patch: int,
             embed: Callable[[torch.Tensor], torch.Tensor] | None = None) -> TokenGrid:
    """Cut ``[B, C, H, W]`` into non-overlapping patches and embed each one.

    A patch vector is laid out as ``(c, i, j)`` with ``i, j`` the pixel offset
    inside the patch. ``embed=None`` keeps the raw patch vectors.
    """
    b, c, h, w = image.shape
    if h % patch or w % patch:
        raise ValueError(f"spatial extents {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = image.reshape(b, c, gh, patch, gw, patch).permute(0, 2, 4, 1, 3, 5)
    x = x.reshape(b, gh * gw, c * patch * patch)
    if embed is not None:
        x = embed(x)
    return TokenGrid(x, gh, gw)


def unpatchify(grid: TokenGrid, patch: int, channels: int) -> torch.Tensor:
    """Inverse rearrangement of :func:`patchify` for raw patch vectors."""
    if grid.channels != channels * patch * patch:
        raise ValueError(f"expected {channels * patch * patch} channels, got {grid.channels}")
    b, gh, gw = grid.batch, grid.height, grid.width
    x = grid.data.reshape(b, gh, gw, channels, patch, patch).permute(0, 3, 1, 4, 2, 5)
    return x.reshape(b, channels, gh * patch, gw * patch)


def pixel_unshuffle(grid: TokenGrid, factor: int) -> TokenGrid:
    """Space-to-channel: ``r x r`` token blocks become single tokens with ``C*r^2`` channels.

    Channel order matches ``torch.nn.functional.pixel_unshuffle``: ``c*r*r + i*r + j``.
    """
    r = factor
    if r < 1:
        raise ValueError("factor must be >= 1")
    if grid.height % r or grid.width % r:
        raise ValueError(f"grid {grid.height}x{grid.width} not divisible by {r}")
    b, h, w, c = grid.batch, grid.height, grid.width, grid.channels
    x = grid.spatial().reshape(b, h // r, r, w // r, r, c).permute(0, 1, 3, 5, 2, 4)
    x = x.reshape(b, (h // r) * (w // r), c * r * r)
    return TokenGrid(x, h // r, w // r)


def pixel_shuffle(grid: TokenGrid, factor: int) -> TokenGrid:
    """Channel-to-space inverse of :func:`pixel_unshuffle`."""
    r = factor
    if r < 1:
        raise ValueError("factor must be >= 1")
    if grid.channels % (r * r):
        raise ValueError(f"channels {grid.channels} not divisible by {r * r}")
    b, h, w, c = grid.batch, grid.height, grid.width, grid.channels // (r * r)
    x = grid.spatial().reshape(b, h, w, c, r, r).permute(0, 1, 4, 2, 5, 3)
    x = x.reshape(b, h * r * w * r, c)
    return TokenGrid(x, h * r, w * r)


def nearest_upsample(grid: TokenGrid, factor: int) -> TokenGrid:
    """Replicate every token into an ``r x r`` block."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return grid
    x = grid.spatial().repeat_interleave(factor, dim=1).repeat_interleave(factor, dim=2)
    return TokenGrid.from_spatial(x)


class RopeTable:
    """Precomputed axial 2D rotary angles.

    The first half of each head vector rotates with the row index, the second
    half with the column index; within a half, consecutive pairs ``(2k, 2k+1)``
    share a frequency.
    """

    def __init__(self, max_height: int, max_width: int, head_dim: int, base: float = 10000.0):
        if head_dim % 4:
            raise ValueError(f"head_dim {head_dim} must be divisible by 4 for 2D RoPE")
        self.max_height = max_height
        self.max_width = max_width
        self.head_dim = head_dim
        quarter = head_dim // 4
        self.inv_freq = base ** (-torch.arange(quarter, dtype=torch.float64) / quarter)
        self.row_angles = torch.arange(max_height, dtype=torch.float64)[:, None] * self.inv_freq
        self.col_angles = torch.arange(max_width, dtype=torch.float64)[:, None] * self.inv_freq

    def angles(self, height: int, width: int) -> torch.Tensor:
        """Angles per token (row-major) and frequency slot, ``[height*width, head_dim // 2]``."""
        if height > self.max_height or width > self.max_width:
            raise ValueError(f"grid {height}x{width} exceeds table {self.max_height}x{self.max_width}")
        rows = self.row_angles[:height, None, :].expand(height, width, -1)
        cols = self.col_angles[None, :width, :].expand(height, width, -1)
        return torch.cat([rows, cols], dim=-1).reshape(height * width, -1)


def apply_rope(x: torch.Tensor, table: RopeTable, height: int, width: int) -> torch.Tensor:
    """Rotate ``[..., height*width, head_dim]`` query/key vectors by their grid position."""
    if x.shape[-1] != table.head_dim:
        raise ValueError(f"head dim {x.shape[-1]} does not match table {table.head_dim}")
    if x.shape[-2] != height * width:
        raise ValueError(f"{x.shape[-2]} tokens for a {height}x{width} grid")
    theta = table.angles(height, width).to(x.dtype)
    cos, sin = theta.cos(), theta.sin()
    pairs = x.unflatten(-1, (-1, 2))
    a, b = pairs[..., 0], pairs[..., 1]
    out = torch.stack([a * cos - b * sin, a * sin + b * cos], dim=-1)
    return out.flatten(-2)
