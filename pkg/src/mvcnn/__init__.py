"""Multi-view CNN toolkit: gradient feature views, a small numpy CNN, training,
metrics and Grad-CAM."""

from .model import ModelConfig, build_model, count_parameters, forward, load_checkpoint, save_checkpoint
from .views import ViewCombination, ViewParams, stack_views

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "ViewCombination",
    "ViewParams",
    "build_model",
    "count_parameters",
    "forward",
    "load_checkpoint",
    "save_checkpoint",
    "stack_views",
]
