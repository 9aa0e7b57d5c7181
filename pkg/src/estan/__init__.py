"""ESTAN: dual-encoder segmentation network with row-column-wise kernels, in numpy."""

from .model import ArchSpec, estan_forward, forward_backward, init_params, param_count, shape_trace
from .training import TrainConfig, dice_loss, load_checkpoint, save_checkpoint, train

__all__ = [
    "ArchSpec",
    "TrainConfig",
    "dice_loss",
    "estan_forward",
    "forward_backward",
    "init_params",
    "load_checkpoint",
    "param_count",
    "save_checkpoint",
    "shape_trace",
    "train",
]
__version__ = "0.1.0"
