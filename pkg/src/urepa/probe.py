"""Per-depth alignment probes on a frozen model."""
from __future__ import annotations

import torch

from .alignment import repa_loss
from .config import RunConfig
from .data import ToyDataset
from .flow import make_pair, sample_times
from .model import UNetSiT, depth_to_stage
from .numerics import SeededRng
from .teacher import TeacherFeatures
from .trainer import AdamW, build_projector


def _tap(model: UNetSiT, rng: SeededRng, dataset: ToyDataset, batch: int, depth: int):
    idx = rng.integers(len(dataset), (batch,))
    x, y = dataset.batch(idx)
    dtype = next(model.parameters()).dtype
    x = x.to(dtype)
    t = sample_times(rng, batch, dtype=dtype)
    z_t, _ = make_pair(x, rng.normal(x.shape, dtype=dtype), t)
    with torch.no_grad():
        hidden = model(z_t, t, y, tap_depth=depth).tap_hidden
    return hidden, t, idx


def probe_depths(model: UNetSiT, config: RunConfig, teacher: TeacherFeatures, dataset: ToyDataset,
                 depths: list[int], steps: int = 50, lr: float = 1e-3, batch: int = 32,
                 seed: int = 0) -> list[dict]:
    """Fit a fresh projector at each depth on frozen features and report the
    mean token-wise cosine similarity on a held-out batch."""
    for d in depths:
        depth_to_stage(config.model, d)
    rows = []
    dtype = next(model.parameters()).dtype
    for depth in depths:
        info = depth_to_stage(config.model, depth)
        root = SeededRng(seed).spawn(f"probe-{depth}")
        proj = build_projector(config, teacher.dim, tap_depth=depth, rng=root.spawn("init")).to(dtype)
        opt = AdamW(proj.parameters(), lr=lr)
        train_rng = root.spawn("fit")
        for _ in range(steps):
            hidden, t, idx = _tap(model, train_rng, dataset, batch, depth)
            y_star = teacher.grid(idx)
            loss = repa_loss(y_star.with_data(y_star.data.to(dtype)), proj(hidden, t))
            opt.zero_grad()
            loss.backward()
            opt.step()
        hidden, t, idx = _tap(model, root.spawn("eval"), dataset, batch, depth)
        with torch.no_grad():
            y_star = teacher.grid(idx)
            sim = -repa_loss(y_star.with_data(y_star.data.to(dtype)), proj(hidden, t)).item()
        rows.append({"depth": depth, "stage": info.name, "height": info.height,
                     "width": info.width, "mean_sim": sim})
    return rows
