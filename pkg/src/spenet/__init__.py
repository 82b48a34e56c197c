"""Selective position encoding networks for rotation-robust point cloud classification."""
from .geom import PointCloud, rotate
from .net import NetworkConfig, ModelState, forward, init_parameters, load_checkpoint, save_checkpoint
from .spe import VARIANTS

__all__ = [
    "PointCloud",
    "rotate",
    "NetworkConfig",
    "ModelState",
    "forward",
    "init_parameters",
    "load_checkpoint",
    "save_checkpoint",
    "VARIANTS",
]
