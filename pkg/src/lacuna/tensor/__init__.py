"""Minimal reverse-mode autodiff for 3D convolutional networks."""
from .autodiff import (
    Tensor,
    concat,
    constant,
    conv1,
    conv3,
    global_avg_pool,
    linear,
    maxpool2,
    parameter,
    relu,
    sigmoid,
    softmax3,
    upsample2,
    weighted_sum,
)
from .augment import AugmentParams, apply_augment, augment, sample_augment
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .optim import AdamState, adam_step
from .unet import UNetConfig, UNetOutput, as_tensors, init_unet, param_shapes, unet_forward

__all__ = [
    "Tensor", "concat", "constant", "conv1", "conv3", "global_avg_pool", "linear", "maxpool2",
    "parameter", "relu", "sigmoid", "softmax3", "upsample2", "weighted_sum",
    "AugmentParams", "apply_augment", "augment", "sample_augment",
    "Checkpoint", "load_checkpoint", "save_checkpoint",
    "AdamState", "adam_step",
    "UNetConfig", "UNetOutput", "as_tensors", "init_unet", "param_shapes", "unet_forward",
]
