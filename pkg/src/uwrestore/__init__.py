"""Depth- and prior-conditioned underwater image restoration."""
from .config import RunConfig, load_config, tiny_config
from .core import DepthRaster, ImagePlane, InvalidInputError, PriorVector

__version__ = "0.1.0"

__all__ = ["RunConfig", "load_config", "tiny_config", "ImagePlane", "PriorVector", "DepthRaster",
           "InvalidInputError"]
