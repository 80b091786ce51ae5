"""Differentiable fields: hash-grid encodings, SDF/radiance heads, optimizer."""

from .checkpoint import load_checkpoint, save_checkpoint
from .hashgrid import HashEncoding, HashGridConfig, level_resolution, spatial_hash
from .networks import RadianceField, SdfField, frequency_encode
from .optim import AdamOptimizer, PoseVariable, so3_exp, so3_hat

__all__ = [
    "AdamOptimizer",
    "HashEncoding",
    "HashGridConfig",
    "PoseVariable",
    "RadianceField",
    "SdfField",
    "frequency_encode",
    "level_resolution",
    "load_checkpoint",
    "save_checkpoint",
    "so3_exp",
    "so3_hat",
    "spatial_hash",
]
