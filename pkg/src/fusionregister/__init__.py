"""Post-registration of infrared/visible fusion results.

A small network that takes a fused image together with its visible and
(possibly misaligned) infrared sources, localises misregistered regions,
warps the fused image back into alignment and restores modality detail.
"""

from .data import RunConfig, load_config, load_image, save_image, scan_dataset
from .errors import (
    CheckpointError,
    ContractError,
    EmptyDatasetError,
    ImageFormatError,
    TrainingAbort,
)
from .losses import LossWeights, total_loss
from .network import FusionRegister, build_model
from .simulate import AffineParams, baseline_fuse, make_training_sample, sample_affine
from .train import fit, init_state, load_checkpoint, lr_schedule, save_checkpoint, train_step
from .warpcore import backward_warp, bidirectional_blend, correlation_layer

__version__ = "0.1.0"

__all__ = [
    "AffineParams",
    "CheckpointError",
    "ContractError",
    "EmptyDatasetError",
    "FusionRegister",
    "ImageFormatError",
    "LossWeights",
    "RunConfig",
    "TrainingAbort",
    "backward_warp",
    "baseline_fuse",
    "bidirectional_blend",
    "build_model",
    "correlation_layer",
    "fit",
    "init_state",
    "load_checkpoint",
    "load_config",
    "load_image",
    "lr_schedule",
    "make_training_sample",
    "sample_affine",
    "save_checkpoint",
    "save_image",
    "scan_dataset",
    "total_loss",
    "train_step",
]
