"""Differentiable 2D Gaussian surfel avatars: skinning, splatting, losses, gradients and training."""
from ._jit import backend
from .geometry import Camera, PosedSurfels, SurfelSet, look_at
from .raster import RasterSettings, render, render_bruteforce, render_tiled
from .skinning import PoseParams, SkinnedTemplate, WeightField, build_weight_field, skin_surfels

__version__ = "0.1.0"

__all__ = ["Camera", "PosedSurfels", "SurfelSet", "look_at", "RasterSettings", "render", "render_bruteforce",
           "render_tiled", "PoseParams", "SkinnedTemplate", "WeightField", "build_weight_field", "skin_surfels",
           "backend", "__version__"]
