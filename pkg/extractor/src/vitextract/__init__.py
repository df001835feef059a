"""Frozen ViT feature extraction into HFD1 dumps."""

from .backbones import available_backbones, load_backbone
from .extract import ExtractSpec, extract, extract_episode_set

__all__ = [
    "ExtractSpec",
    "available_backbones",
    "extract",
    "extract_episode_set",
    "load_backbone",
]

__version__ = "0.1.0"
