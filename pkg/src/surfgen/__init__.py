"""Diffusion models over articulated surface meshes with joint tokens."""

from .diffusion import NoiseSchedule, SamplerConfig, make_sigmoid_schedule
from .mesh import MeshTopology, Upsampler
from .model import Denoiser, ModelConfig
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Denoiser",
    "MeshTopology",
    "ModelConfig",
    "NoiseSchedule",
    "SamplerConfig",
    "TrainConfig",
    "Upsampler",
    "load_checkpoint",
    "make_sigmoid_schedule",
    "save_checkpoint",
    "train",
]
