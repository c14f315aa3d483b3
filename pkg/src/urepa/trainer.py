"""Deterministic training loop: flow matching plus alignment, AdamW, EMA, checkpoints."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

from .alignment import (
    Projector,
    combined_loss,
    manifold_loss_per_sample,
    repa_loss_per_sample,
    zero_norm_tokens,
)
from .config import RunConfig, TrainerConfig, dump_config, from_dict, to_dict
from .data import ToyDataset
from .flow import make_pair, sample_times, velocity_loss
from .model import UNetSiT, depth_to_stage
from .numerics import DTYPES, SeededRng
from .teacher import StubEncoder, TeacherFeatures, encode, load_features

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iter", "velocity_loss", "repa_loss", "manifold_loss", "mean_sim", "grad_norm")
CKPT_MAGIC = b"URCK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sH32s")


class CheckpointError(RuntimeError):
    pass


class AdamW:
    """AdamW with decoupled weight decay; parameters with no gradient are left alone."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.exp_avg = [torch.zeros_like(p) for p in self.params]
        self.exp_avg_sq = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1 - b1 ** self.step_count
        bc2 = 1 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.exp_avg, self.exp_avg_sq):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                p.mul_(1 - self.lr * self.weight_decay)
            m.lerp_(g, 1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v.sqrt() / math.sqrt(bc2)).add_(self.eps)
            p.addcdiv_(m, denom, value=-self.lr / bc1)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {"step": self.step_count, "lr": self.lr, "betas": list(self.betas), "eps": self.eps,
                "weight_decay": self.weight_decay, "exp_avg": self.exp_avg,
                "exp_avg_sq": self.exp_avg_sq}

    def load_state_dict(self, state: dict):
        self.step_count = int(state["step"])
        self.lr = state["lr"]
        self.betas = tuple(state["betas"])
        self.eps = state["eps"]
        self.weight_decay = state["weight_decay"]
        for dst, src in zip(self.exp_avg + self.exp_avg_sq, state["exp_avg"] + state["exp_avg_sq"]):
            if dst.shape != src.shape:
                raise CheckpointError("optimizer moment shape mismatch")
            dst.copy_(src)


@torch.no_grad()
def ema_update(shadow: dict[str, torch.Tensor], params: dict[str, torch.Tensor], decay: float):
    """In place ``shadow = decay * shadow + (1 - decay) * params``."""
    if not 0 <= decay < 1:
        raise ValueError("decay must lie in [0, 1)")
    for name, s in shadow.items():
        p = params[name]
        if p.shape != s.shape:
            raise ValueError(f"EMA shape mismatch for {name}")
        # lerp is exact at both ends: weight 1 returns params, equal inputs return shadow
        s.lerp_(p.detach(), 1 - decay)
    return shadow


@dataclass
class TrainState:
    model: UNetSiT
    projector: Projector
    optimizer: AdamW
    ema: dict[str, torch.Tensor]
    rng: SeededRng
    iteration: int = 0
    skipped: int = 0

    def trainable(self) -> list[nn.Parameter]:
        return list(self.model.parameters()) + list(self.projector.parameters())

    def live_params(self) -> dict[str, torch.Tensor]:
        return dict(self.model.named_parameters())


def build_teacher(config: RunConfig, dataset: ToyDataset) -> TeacherFeatures:
    n_tokens = config.model.grid_size ** 2
    tc = config.teacher
    if tc.provider == "file":
        feats = load_features(tc.path, num_tokens=n_tokens)
    else:
        stub = StubEncoder(tc.stub)
        feats = encode(dataset.images, stub)
        feats.validate(n_tokens)
    if len(feats) < len(dataset):
        raise ValueError(f"teacher store has {len(feats)} samples, dataset has {len(dataset)}")
    return feats.standardized() if tc.normalize else feats


def build_projector(config: RunConfig, teacher_dim: int, tap_depth: int | None = None,
                    rng: SeededRng | None = None) -> Projector:
    depth = config.tap_depth if tap_depth is None else tap_depth
    info = depth_to_stage(config.model, depth)
    factor = config.model.grid_size // info.height
    proj = Projector(config.model.channels, teacher_dim, factor,
                     config.alignment.placement, config.alignment.time_aware)
    gen = (rng or SeededRng(config.seed).spawn("projector")).generator
    for m in proj.mlp:
        if isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight, generator=gen)
            nn.init.zeros_(m.bias)
    return proj


def init_state(config: RunConfig, teacher_dim: int) -> TrainState:
    root = SeededRng(config.seed)
    dtype = DTYPES[config.trainer.dtype]
    model = UNetSiT(config.model, root.spawn("model")).to(dtype)
    projector = build_projector(config, teacher_dim, rng=root.spawn("projector")).to(dtype)
    tc = config.trainer
    params = list(model.parameters()) + list(projector.parameters())
    opt = AdamW(params, tc.lr, tc.betas, tc.adam_eps, tc.weight_decay)
    ema = {k: v.detach().clone() for k, v in model.named_parameters()}
    return TrainState(model, projector, opt, ema, root.spawn("train"))


def grad_norm(params) -> float:
    sq = [p.grad.pow(2).sum() for p in params if p.grad is not None]
    return math.sqrt(float(torch.stack(sq).sum())) if sq else 0.0


def train_step(state: TrainState, batch: dict, teacher: TeacherFeatures, config: RunConfig,
               ema_decay: float | None = None, grad_clip: float | None = None) -> dict:
    """One optimisation step over the combined objective; returns the step's metrics."""
    x_star, labels, indices = batch["x_star"], batch["labels"], batch["indices"]
    if x_star.shape[0] == 0:
        raise ValueError("empty batch")
    spec = config.alignment
    model, projector, rng = state.model, state.projector, state.rng
    dtype = next(model.parameters()).dtype
    x_star = x_star.to(dtype)
    b = x_star.shape[0]

    t = sample_times(rng, b, dtype=dtype)
    eps = rng.normal(x_star.shape, dtype=dtype)
    z_t, v_target = make_pair(x_star, eps, t)
    out = model(z_t, t, labels, cfg_drop=True, rng=rng, tap_depth=config.tap_depth)
    v_loss = velocity_loss(out.velocity, v_target)

    y_star = teacher.grid(indices)
    y_star = y_star.with_data(y_star.data.to(dtype))
    projected = projector(out.tap_hidden, t)
    repa = repa_loss_per_sample(y_star, projected)
    mani = manifold_loss_per_sample(y_star, projected)
    loss = combined_loss(v_loss, repa, mani, spec, t)

    metrics = {
        "iter": state.iteration + 1,
        "velocity_loss": v_loss.item(),
        "repa_loss": repa.mean().item(),
        "manifold_loss": mani.mean().item(),
        "mean_sim": -repa.mean().item(),
        "loss": loss.item(),
        "zero_norm_tokens": zero_norm_tokens(projected),
    }
    state.optimizer.zero_grad()
    if not torch.isfinite(loss):
        state.skipped += 1
        state.iteration += 1
        log.warning("non-finite loss at iter %d; step skipped (%d so far)",
                    state.iteration, state.skipped)
        metrics.update(grad_norm=float("nan"), skipped=True)
        return metrics

    loss.backward()
    params = state.trainable()
    metrics["grad_norm"] = grad_norm(params)
    if grad_clip:
        torch.nn.utils.clip_grad_norm_([p for p in params if p.grad is not None], grad_clip)
    state.optimizer.step()
    state.optimizer.zero_grad()
    decay = config.trainer.ema_decay if ema_decay is None else ema_decay
    ema_update(state.ema, state.live_params(), decay)
    state.iteration += 1
    metrics["skipped"] = False
    return metrics


def draw_batch(state: TrainState, dataset: ToyDataset, batch_size: int) -> dict:
    indices = state.rng.integers(len(dataset), (batch_size,))
    x_star, labels = dataset.batch(indices)
    return {"x_star": x_star, "labels": labels, "indices": indices}


def _payload(state: TrainState, config: RunConfig) -> dict:
    return {
        "version": CKPT_VERSION,
        "config": to_dict(config),
        "model": state.model.state_dict(),
        "projector": state.projector.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "ema": state.ema,
        "rng": state.rng.get_state(),
        "iteration": state.iteration,
        "skipped": state.skipped,
    }


def checkpoint_save(path: str | Path, state: TrainState, config: RunConfig):
    buf = io.BytesIO()
    torch.save(_payload(state, config), buf)
    body = buf.getvalue()
    digest = hashlib.sha256(body).digest()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, digest) + body)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, digest = _CKPT_HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    body = raw[_CKPT_HEADER.size:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupted")
    return torch.load(io.BytesIO(body), weights_only=True)


def checkpoint_load(path: str | Path, teacher_dim: int | None = None) -> tuple[TrainState, RunConfig]:
    payload = read_checkpoint(path)
    config = from_dict(RunConfig, payload["config"])
    if teacher_dim is None:
        teacher_dim = payload["projector"]["mlp.4.weight"].shape[0]
        if config.alignment.placement == "upscale_in_mlp":
            f = config.model.grid_size // depth_to_stage(config.model, config.tap_depth).height
            teacher_dim //= f * f
    state = init_state(config, teacher_dim)
    state.model.load_state_dict(payload["model"])
    state.projector.load_state_dict(payload["projector"])
    state.optimizer.load_state_dict(payload["optimizer"])
    for k, v in payload["ema"].items():
        state.ema[k].copy_(v)
    state.rng = SeededRng.from_state(payload["rng"])
    state.iteration = int(payload["iteration"])
    state.skipped = int(payload["skipped"])
    return state, config


def format_row(m: dict) -> list[str]:
    return [str(m["iter"])] + [repr(float(m[c])) for c in METRIC_COLUMNS[1:]]


@dataclass
class Trainer:
    """Drives ``train_step`` over the toy dataset and writes run artefacts."""

    config: RunConfig
    out_dir: Path | None = None
    dataset: ToyDataset = field(init=False)
    teacher: TeacherFeatures = field(init=False)
    state: TrainState = field(init=False)
    history: list = field(default_factory=list)

    def __post_init__(self):
        cfg = self.config
        m = cfg.model
        self.dataset = ToyDataset(cfg.data.num_samples, m.num_classes, m.input_size,
                                  m.in_channels, seed=cfg.seed, noise=cfg.data.noise)
        self.teacher = build_teacher(cfg, self.dataset)
        self.state = init_state(cfg, self.teacher.dim)
        if self.out_dir is not None:
            self.out_dir = Path(self.out_dir)

    @classmethod
    def resume(cls, checkpoint: str | Path, out_dir: Path | None = None) -> "Trainer":
        _, config = checkpoint_load(checkpoint)
        trainer = cls(config, out_dir)
        trainer.state, _ = checkpoint_load(checkpoint, trainer.teacher.dim)
        return trainer

    def _prepare_outputs(self, append: bool):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "config.yaml").write_text(dump_config(self.config))
        (self.out_dir / "run_meta.yaml").write_text(
            f"teacher_provenance: {self.teacher.provenance}\n"
            f"teacher_normalized: {str(self.teacher.normalized).lower()}\n"
            f"teacher_tokens: {self.teacher.num_tokens}\n"
            f"teacher_dim: {self.teacher.dim}\n"
            f"tap_depth: {self.config.tap_depth}\n"
            f"torch_threads: {torch.get_num_threads()}\n"
        )
        metrics = self.out_dir / "metrics.csv"
        timing = self.out_dir / "timing.csv"
        if not append or not metrics.exists():
            with open(metrics, "w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_COLUMNS)
            with open(timing, "w", newline="") as fh:
                csv.writer(fh).writerow(("iter", "wall_ms"))

    def run(self, iters: int | None = None, append: bool = False) -> list[dict]:
        tc: TrainerConfig = self.config.trainer
        iters = tc.iters if iters is None else iters
        writer = None
        if self.out_dir is not None:
            self._prepare_outputs(append)
            mfh = open(self.out_dir / "metrics.csv", "a", newline="")
            tfh = open(self.out_dir / "timing.csv", "a", newline="")
            writer, twriter = csv.writer(mfh), csv.writer(tfh)
        try:
            for _ in range(iters):
                start = time.perf_counter()
                batch = draw_batch(self.state, self.dataset, tc.batch_size)
                m = train_step(self.state, batch, self.teacher, self.config, grad_clip=tc.grad_clip)
                m["wall_ms"] = (time.perf_counter() - start) * 1000
                self.history.append(m)
                if writer is not None:
                    writer.writerow(format_row(m))
                    twriter.writerow((m["iter"], f"{m['wall_ms']:.3f}"))
                    if tc.checkpoint_every and self.state.iteration % tc.checkpoint_every == 0:
                        checkpoint_save(self.out_dir / f"ckpt_{self.state.iteration:07d}.urck",
                                        self.state, self.config)
        finally:
            if writer is not None:
                mfh.close()
                tfh.close()
        if self.out_dir is not None:
            checkpoint_save(self.out_dir / "last.urck", self.state, self.config)
        return self.history
