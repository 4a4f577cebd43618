"""geneoseg: interpretable 3D segmentation with geometric equivariant operators."""

from .kernels import ArrowParams, CylinderParams, KernelTensor, NegSphereParams
from .model import ObserverParams, forward, load_checkpoint, observer, predict, save_checkpoint
from .pointcloud import PointCloud, VoxelGrid, load_pointcloud, save_pointcloud, voxelize
from .training import LossConfig, Metrics, TrainConfig, evaluate, init_params, train

__all__ = [
    "ArrowParams",
    "CylinderParams",
    "KernelTensor",
    "LossConfig",
    "Metrics",
    "NegSphereParams",
    "ObserverParams",
    "PointCloud",
    "TrainConfig",
    "VoxelGrid",
    "evaluate",
    "forward",
    "init_params",
    "load_checkpoint",
    "load_pointcloud",
    "observer",
    "predict",
    "save_checkpoint",
    "save_pointcloud",
    "train",
    "voxelize",
]

__version__ = "0.1.0"
