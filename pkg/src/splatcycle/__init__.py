"""Multi-view diffusion sampling corrected by a feed-forward Gaussian-splat
reconstructor, at toy scale on procedural scenes."""

from .cameras import CameraPose, orbit_camera
from .pipeline import CycleModel, ModelConfig, PriorProvider, TrainConfig, sample, train_step
from .scheduler import make_schedule, make_step_grid
from .splat import GaussianCloud, render

__version__ = "0.1.0"

__all__ = ["CameraPose", "orbit_camera", "CycleModel", "ModelConfig", "PriorProvider", "TrainConfig", "sample",
           "train_step", "make_schedule", "make_step_grid", "GaussianCloud", "render"]
