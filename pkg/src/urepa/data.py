"""Procedural class-conditional gratings standing in for image latents."""
from __future__ import annotations

import math

import torch

from .numerics import SeededRng


class ToyDataset:
    """``num_samples`` fixed images; class ``k`` is a grating with its own orientation
    and frequency, each sample draws a random phase, contrast jitter and pixel noise."""

    def __init__(self, num_samples: int = 2048, num_classes: int = 10, image_size: int = 16,
                 channels: int = 4, seed: int = 0, noise: float = 0.1):
        rng = SeededRng(seed).spawn("toy-dataset")
        self.num_classes = num_classes
        self.labels = rng.integers(num_classes, (num_samples,))
        phase = rng.uniform((num_samples, 1, 1, 1), 0, 2 * math.pi)
        contrast = rng.uniform((num_samples, 1, 1, 1), 0.8, 1.2)
        k = self.labels.to(torch.float32)
        theta = (math.pi * k / num_classes).view(-1, 1, 1, 1)
        freq = (1.0 + (self.labels % 3).to(torch.float32)).view(-1, 1, 1, 1)
        coords = torch.arange(image_size, dtype=torch.float32) / image_size
        v, u = torch.meshgrid(coords, coords, indexing="ij")
        proj = u * torch.cos(theta) + v * torch.sin(theta)
        offsets = (torch.arange(channels, dtype=torch.float32) * math.pi / 4).view(1, -1, 1, 1)
        images = math.sqrt(2) * contrast * torch.cos(2 * math.pi * freq * proj + phase + offsets)
        self.images = images + noise * rng.normal(images.shape)

    def __len__(self):
        return self.images.shape[0]

    def batch(self, indices: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.images[indices], self.labels[indices]
