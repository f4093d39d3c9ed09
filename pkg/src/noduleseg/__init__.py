"""Seeded lung nodule segmentation with a dual-branch residual network."""

from .dbresnet import DBResNet, NetworkConfig, build, param_count
from .evaluator import asd, dsc, ppv, sen
from .segmenter import SeedBox, propagate
from .volume_store import BinaryMask3D, CtVolume, consensus_mask, normalize_hu

__version__ = "0.1.0"

__all__ = [
    "BinaryMask3D",
    "CtVolume",
    "DBResNet",
    "NetworkConfig",
    "SeedBox",
    "asd",
    "build",
    "consensus_mask",
    "dsc",
    "normalize_hu",
    "param_count",
    "ppv",
    "propagate",
    "sen",
]
