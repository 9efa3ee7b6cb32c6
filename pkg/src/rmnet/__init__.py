"""Rotation meanout networks in NumPy: a small autodiff engine, the RM operator,
training, metrics, retrieval and an invariance audit."""

from .autodiff import Tensor, backward, no_grad, precision, tensor
from .model import Model, ModelGraph, build_model, rmnet_s
from .rm import RmConfig, RotationMeanout, fuse_embedding, fuse_maxout, fuse_meanout, rm_forward
from .rotation import ConfigError, rot90_exact, rotate_bilinear

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "Model", "ModelGraph", "RmConfig", "RotationMeanout", "Tensor", "backward",
    "build_model", "fuse_embedding", "fuse_maxout", "fuse_meanout", "no_grad", "precision",
    "rm_forward", "rmnet_s", "rot90_exact", "rotate_bilinear", "tensor",
]
