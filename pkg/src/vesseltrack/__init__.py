"""Pulmonary artery tracking by iterative cylinder fitting, plus sparse-surface evaluation."""

from .volgrid import Geometry, Mask, Volume, load_volume, save_volume

__version__ = "0.1.0"

__all__ = ["Geometry", "Mask", "Volume", "load_volume", "save_volume", "__version__"]
