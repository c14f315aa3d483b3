"""Linear-interpolant flow matching and a guided ODE sampler.

Time runs from ``t = 0`` (clean data) to ``t = 1`` (pure noise); sampling
integrates the velocity field from 1 down to 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch

from .numerics import SeededRng

VelocityFn = Callable[[torch.Tensor, torch.Tensor, "torch.Tensor | None"], torch.Tensor]

T_EPS = 1e-4


def alpha(t):
    return 1 - t


def sigma(t):
    return t


def make_pair(x_star: torch.Tensor, eps: torch.Tensor, t) -> tuple[torch.Tensor, torch.Tensor]:
    """Noisy input ``z_t = (1 - t) x + t eps`` and velocity target ``eps - x``."""
    if x_star.shape != eps.shape:
        raise ValueError(f"shape mismatch {tuple(x_star.shape)} vs {tuple(eps.shape)}")
    if torch.is_tensor(t) and t.dim() == 1:
        t = t.view(-1, *([1] * (x_star.dim() - 1)))
    return alpha(t) * x_star + sigma(t) * eps, eps - x_star


def velocity_loss(pred: torch.Tensor, v_target: torch.Tensor) -> torch.Tensor:
    if pred.shape != v_target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(v_target.shape)}")
    return (pred - v_target).pow(2).mean()


def sample_times(rng: SeededRng, n: int, eps: float = T_EPS, dtype=torch.float32) -> torch.Tensor:
    return rng.uniform((n,), eps, 1 - eps, dtype=dtype)


@dataclass(frozen=True)
class GuidanceConfig:
    cfg_scale: float = 1.65
    interval: tuple[float, float] = (0.0, 0.7)
    steps: int = 50
    method: str = "euler"

    def __post_init__(self):
        object.__setattr__(self, "interval", tuple(float(v) for v in self.interval))
        lo, hi = self.interval
        if not 0 <= lo <= hi <= 1:
            raise ValueError(f"guidance interval {self.interval} must satisfy 0 <= lo <= hi <= 1")
        if self.cfg_scale < 1:
            raise ValueError("cfg_scale must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.method not in ("euler", "heun"):
            raise ValueError(f"unknown method {self.method!r}")


def time_grid(steps: int, dtype=torch.float64) -> torch.Tensor:
    return torch.linspace(1.0, 0.0, steps + 1, dtype=dtype)


def step_is_guided(t_cur: float, t_next: float, interval: tuple[float, float]) -> bool:
    """A step spanning ``[t_next, t_cur]`` is guided when the span meets the interval (inclusive)."""
    lo, hi = interval
    return t_next <= hi and t_cur >= lo


def guided_velocity(fn: VelocityFn, z: torch.Tensor, t: torch.Tensor, labels: torch.Tensor | None,
                    scale: float, guided: bool) -> torch.Tensor:
    v_cond = fn(z, t, labels)
    if not guided or scale == 1 or labels is None:
        return v_cond
    v_uncond = fn(z, t, None)
    return v_uncond + scale * (v_cond - v_uncond)


@dataclass
class SampleTrace:
    guided_steps: list = field(default_factory=list)


def integrate(fn: VelocityFn, z: torch.Tensor, labels: torch.Tensor | None,
              cfg: GuidanceConfig, trace: SampleTrace | None = None) -> torch.Tensor:
    """Integrate ``dz/dt = v(z, t)`` from ``t = 1`` to ``t = 0`` starting at ``z``."""
    ts = time_grid(cfg.steps, dtype=z.dtype)
    for k in range(cfg.steps):
        t_cur, t_next = ts[k], ts[k + 1]
        guided = step_is_guided(float(t_cur), float(t_next), cfg.interval)
        if trace is not None and guided and cfg.cfg_scale != 1:
            trace.guided_steps.append(k)
        dt = t_next - t_cur
        batch_t = t_cur.expand(z.shape[0])
        v = guided_velocity(fn, z, batch_t, labels, cfg.cfg_scale, guided)
        if cfg.method == "euler":
            z = z + dt * v
        else:
            z_pred = z + dt * v
            v_next = guided_velocity(fn, z_pred, t_next.expand(z.shape[0]), labels,
                                     cfg.cfg_scale, guided)
            z = z + dt * 0.5 * (v + v_next)
        if not torch.isfinite(z).all():
            raise FloatingPointError(
                f"non-finite sampler state at step {k} (t={float(t_cur):.4f}); "
                f"max |v| = {v.abs().max().item():.3e}"
            )
    return z


def sample(fn: VelocityFn, shape: tuple[int, ...], labels: torch.Tensor | None,
           cfg: GuidanceConfig, rng: SeededRng, dtype=torch.float32,
           trace: SampleTrace | None = None) -> torch.Tensor:
    """Draw Gaussian noise from ``rng`` and integrate it to data."""
    noise = rng.normal(shape, dtype=dtype)
    with torch.no_grad():
        return integrate(fn, noise, labels, cfg, trace)
