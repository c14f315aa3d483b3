"""Dense-array plumbing: seeded streams, deterministic init, finite-difference checks.

Every tensor in the package is a ``torch.Tensor``; autograd supplies the
analytic gradients and :func:`finite_difference_grad` is the independent
oracle they are checked against.
"""
from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class TensorSpec:
    shape: tuple[int, ...]
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if not self.shape or any(s < 1 for s in self.shape):
            raise ValueError(f"invalid shape {self.shape}: all extents must be >= 1")
        if self.dtype not in DTYPES:
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]


@dataclass
class SeededRng:
    """A reproducible random stream.

    Child streams derived with :meth:`spawn` are independent of each other and
    of the parent, and depend only on ``(seed, path of names)``.
    """

    seed: int
    stream: tuple[int, ...] = ()
    draws: int = 0
    generator: torch.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self.generator = torch.Generator().manual_seed(int(ss.generate_state(1, np.uint64)[0]))

    def spawn(self, name: str | int) -> "SeededRng":
        key = name if isinstance(name, int) else _stable_key(name)
        return SeededRng(self.seed, self.stream + (key,))

    def _tick(self) -> torch.Generator:
        self.draws += 1
        return self.generator

    def normal(self, shape: Sequence[int], dtype=torch.float32) -> torch.Tensor:
        return torch.randn(tuple(shape), generator=self._tick(), dtype=dtype)

    def uniform(self, shape: Sequence[int], low: float = 0.0, high: float = 1.0,
                dtype=torch.float32) -> torch.Tensor:
        u = torch.rand(tuple(shape), generator=self._tick(), dtype=dtype)
        return low + (high - low) * u

    def integers(self, high: int, shape: Sequence[int]) -> torch.Tensor:
        return torch.randint(high, tuple(shape), generator=self._tick())

    def get_state(self) -> dict:
        return {"seed": self.seed, "stream": list(self.stream), "draws": self.draws,
                "generator": self.generator.get_state()}

    @classmethod
    def from_state(cls, state: dict) -> "SeededRng":
        rng = cls(int(state["seed"]), tuple(state["stream"]))
        rng.draws = int(state["draws"])
        rng.generator.set_state(state["generator"])
        return rng


def _stable_key(name: str) -> int:
    # Python's hash() is salted per process; stream names need a fixed mapping.
    return int.from_bytes(hashlib.blake2b(name.encode("utf-8"), digest_size=4).digest(), "little")


def seeded_init(spec: TensorSpec, rng: SeededRng | None, scheme: str = "normal",
                std: float = 0.02) -> torch.Tensor:
    if scheme == "zeros":
        return torch.zeros(spec.shape, dtype=spec.torch_dtype)
    if scheme == "ones":
        return torch.ones(spec.shape, dtype=spec.torch_dtype)
    if scheme == "normal":
        if not std > 0:
            raise ValueError("normal init requires std > 0")
        if rng is None:
            raise ValueError("normal init requires an rng")
        return rng.normal(spec.shape, dtype=spec.torch_dtype) * std
    raise ValueError(f"unknown init scheme {scheme!r}")


def finite_difference_grad(f: Callable[[torch.Tensor], torch.Tensor | float],
                           x: torch.Tensor, eps: float = 1e-3, chunk: int = 0) -> torch.Tensor:
    """Central-difference gradient of a scalar function.

    With ``chunk > 0`` the perturbed copies are evaluated ``chunk`` at a time
    through ``torch.func.vmap``; otherwise one coordinate at a time.
    """
    x = x.detach().to(torch.float64).clone()
    if chunk > 0:
        return _fd_batched(f, x, eps, chunk)
    flat = x.view(-1)
    grad = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = float(f(x))
            flat[i] = orig - eps
            fm = float(f(x))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite function value at coordinate {i}")
            grad[i] = (fp - fm) / (2 * eps)
    return grad.view_as(x)


def _fd_batched(f, x: torch.Tensor, eps: float, chunk: int) -> torch.Tensor:
    n = x.numel()
    batched = torch.func.vmap(f)
    grad = torch.empty(n, dtype=x.dtype)
    with torch.no_grad(), warnings.catch_warnings():
        # ops without a batching rule fall back to a per-sample loop, which is still correct
        warnings.filterwarnings("ignore", message=".*batching rule.*")
        for lo in range(0, n, chunk):
            idx = torch.arange(lo, min(lo + chunk, n))
            step = torch.zeros(len(idx), n, dtype=x.dtype)
            step[torch.arange(len(idx)), idx] = eps
            base = x.reshape(1, n)
            fp = batched((base + step).view(-1, *x.shape))
            fm = batched((base - step).view(-1, *x.shape))
            if not (torch.isfinite(fp).all() and torch.isfinite(fm).all()):
                raise FloatingPointError(f"non-finite function value in coordinates {lo}..{idx[-1]}")
            grad[idx] = (fp - fm) / (2 * eps)
    return grad.view_as(x)


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """Max abs deviation scaled by the larger of the two gradients' max magnitude."""
    analytic = analytic.detach().to(torch.float64)
    numeric = numeric.detach().to(torch.float64)
    scale = max(analytic.abs().max().item(), numeric.abs().max().item())
    diff = (analytic - numeric).abs().max().item()
    if scale < 1e-12:
        return diff
    return diff / scale


def autograd_grad(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    x = x.detach().to(torch.float64).clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x, allow_unused=True)
    return torch.zeros_like(x) if g is None else g


def check_gradient(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                   eps: float = 1e-3, chunk: int = 0) -> float:
    """Relative error between the autograd gradient of ``f`` at ``x`` and its central difference."""
    return relative_error(autograd_grad(f, x), finite_difference_grad(f, x, eps, chunk))
