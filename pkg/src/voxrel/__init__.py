"""Volumetric image classification with relevance heatmaps."""

from voxrel.volume import Volume, Mask, load_volume, save_volume, load_mask, save_mask

__all__ = ["Volume", "Mask", "load_volume", "save_volume", "load_mask", "save_mask"]

__version__ = "0.1.0"
