"""Representation alignment for U-Net diffusion transformers, at desk scale."""
from .alignment import (
    AlignmentSpec,
    Projector,
    combined_loss,
    manifold_loss,
    mean_tokenwise_similarity,
    project,
    repa_loss,
    schedule_weight,
)
from .config import RunConfig, load_config
from .flow import GuidanceConfig, make_pair, sample, velocity_loss
from .geometry import TokenGrid
from .model import ModelConfig, UNetSiT, default_tap, depth_to_stage

__version__ = "0.1.0"
