"""Projector and alignment losses between student hidden states and teacher features."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import timestep_frequencies
from .geometry import TokenGrid, nearest_upsample, pixel_shuffle

PLACEMENTS = ("upscale_before_mlp", "upscale_in_mlp", "upscale_after_mlp")
SCHEDULES = ("constant", "sched_a", "sched_b", "sched_c")
NORM_EPS = 1e-8


@dataclass(frozen=True)
class AlignmentSpec:
    lam: float = 0.5
    w: float = 3.0
    schedule: str = "constant"
    placement: str = "upscale_after_mlp"
    time_aware: bool = False
    tap_depth: int | None = None

    def __post_init__(self):
        if self.lam < 0 or self.w < 0:
            raise ValueError("loss weights must be non-negative")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}; choose from {SCHEDULES}")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {self.placement!r}; choose from {PLACEMENTS}")


class Projector(nn.Module):
    """Three-layer SiLU MLP from student channels to teacher width, plus upscaling.

    ``placement`` decides where the ``factor``-times upscale happens:
    nearest replication before the MLP, a ``D*r^2``-wide last layer followed by
    pixel-shuffle, or nearest replication after the MLP. With ``time_aware``
    the output is modulated as ``gamma(t) * out + beta(t)``; the head is
    zero-initialised with ``gamma = 1 + delta`` so it starts as the identity.
    """

    def __init__(self, channels: int, teacher_dim: int, factor: int = 1,
                 placement: str = "upscale_after_mlp", time_aware: bool = False,
                 hidden: int | None = None):
        super().__init__()
        if placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {placement!r}")
        if factor < 1:
            raise ValueError("upscale factor must be >= 1")
        hidden = hidden or channels
        self.placement = placement
        self.factor = factor
        self.teacher_dim = teacher_dim
        out = teacher_dim * factor * factor if placement == "upscale_in_mlp" else teacher_dim
        self.mlp = nn.Sequential(
            nn.Linear(channels, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, out),
        )
        self.time_dim = channels
        self.time_head = None
        if time_aware:
            self.time_head = nn.Sequential(nn.SiLU(), nn.Linear(self.time_dim, 2 * teacher_dim))
            nn.init.zeros_(self.time_head[1].weight)
            nn.init.zeros_(self.time_head[1].bias)

    def modulation(self, t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        dtype = self.mlp[0].weight.dtype
        if self.time_head is None:
            ones = torch.ones(t.shape[0], self.teacher_dim, dtype=dtype)
            return ones, torch.zeros_like(ones)
        feats = timestep_frequencies(t.to(dtype) * 1000, self.time_dim)
        delta, beta = self.time_head(feats).chunk(2, dim=-1)
        return 1 + delta, beta

    def forward(self, h: TokenGrid, t: torch.Tensor | None = None) -> TokenGrid:
        r = self.factor
        if self.placement == "upscale_before_mlp":
            h = nearest_upsample(h, r)
            out = h.with_data(self.mlp(h.data))
        elif self.placement == "upscale_in_mlp":
            out = pixel_shuffle(h.with_data(self.mlp(h.data)), r)
        else:
            out = nearest_upsample(h.with_data(self.mlp(h.data)), r)
        if self.time_head is not None:
            if t is None:
                raise ValueError("time-aware projector needs t")
            t = t.expand(out.batch) if t.dim() == 0 else t
            gamma, beta = self.modulation(t)
            out = out.with_data(gamma.unsqueeze(1) * out.data + beta.unsqueeze(1))
        return out


def project(h_t: TokenGrid, t: torch.Tensor | None, projector: Projector) -> TokenGrid:
    return projector(h_t, t)


def _check_pair(y_star: TokenGrid, projected: TokenGrid):
    if y_star.data.shape != projected.data.shape:
        raise ValueError(
            f"teacher {tuple(y_star.data.shape)} and projected {tuple(projected.data.shape)} "
            "token grids differ; alignment needs equal token count and width"
        )


def zero_norm_tokens(grid: TokenGrid) -> int:
    """Number of tokens whose norm falls under the cosine stabiliser."""
    return int((grid.data.detach().norm(dim=-1) < NORM_EPS).sum())


def _unit(x: torch.Tensor) -> torch.Tensor:
    return F.normalize(x, dim=-1, eps=NORM_EPS)


def repa_loss_per_sample(y_star: TokenGrid, projected: TokenGrid) -> torch.Tensor:
    _check_pair(y_star, projected)
    cos = (_unit(y_star.data) * _unit(projected.data)).sum(-1)
    return -cos.mean(dim=1)


def repa_loss(y_star: TokenGrid, projected: TokenGrid) -> torch.Tensor:
    """Negative mean token-wise cosine similarity."""
    return repa_loss_per_sample(y_star, projected).mean()


def similarity_matrix(grid: TokenGrid) -> torch.Tensor:
    u = _unit(grid.data)
    return u @ u.transpose(1, 2)


def manifold_loss_per_sample(y_star: TokenGrid, projected: TokenGrid) -> torch.Tensor:
    if y_star.batch != projected.batch or y_star.num_tokens != projected.num_tokens:
        raise ValueError("manifold loss needs equal batch and token count")
    diff = similarity_matrix(y_star) - similarity_matrix(projected)
    return diff.pow(2).mean(dim=(1, 2))


def manifold_loss(y_star: TokenGrid, projected: TokenGrid) -> torch.Tensor:
    """Mean squared gap between the intra-sample token cosine-similarity matrices."""
    return manifold_loss_per_sample(y_star, projected).mean()


def mean_tokenwise_similarity(y_star: TokenGrid, projected: TokenGrid) -> torch.Tensor:
    return -repa_loss(y_star, projected)


def schedule_weight(schedule: str, t):
    """Time-dependent multiplier on the alignment terms; works on floats or tensors."""
    if isinstance(t, torch.Tensor):
        one = torch.ones_like(t)
        if schedule == "constant":
            return one
        if schedule == "sched_a":
            return torch.maximum(one, t + 0.5)
        if schedule == "sched_b":
            return torch.maximum(one, -t + 1.5)
        if schedule == "sched_c":
            return torch.minimum(one, torch.maximum(-2 * t + 1.5, 2 * t - 0.5))
    else:
        if schedule == "constant":
            return 1.0
        if schedule == "sched_a":
            return max(1.0, t + 0.5)
        if schedule == "sched_b":
            return max(1.0, -t + 1.5)
        if schedule == "sched_c":
            return min(1.0, max(-2 * t + 1.5, 2 * t - 0.5))
    raise ValueError(f"unknown schedule {schedule!r}")


def combined_loss(velocity_loss: torch.Tensor, repa, manifold, spec: AlignmentSpec,
                  t_batch: torch.Tensor | None = None) -> torch.Tensor:
    """``velocity + weight(t) * lam * (repa + w * manifold)``.

    ``repa`` and ``manifold`` may be per-sample vectors (weighted per sample,
    then averaged) or scalars (weighted by the batch-mean schedule value).
    """
    if spec.lam == 0:
        return velocity_loss
    align = repa + spec.w * manifold if spec.w != 0 else repa
    if spec.schedule != "constant":
        if t_batch is None:
            raise ValueError(f"schedule {spec.schedule!r} needs t_batch")
        weight = schedule_weight(spec.schedule, t_batch)
        align = align * weight if torch.is_tensor(align) and align.dim() == 1 else align * weight.mean()
    if torch.is_tensor(align) and align.dim() == 1:
        align = align.mean()
    return velocity_loss + spec.lam * align
