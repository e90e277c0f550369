"""Minimal deterministic neural-network engine and the two validator streams."""

from .layers import (
    conv2d_3x3,
    conv2d_3x3_backward,
    dense,
    dense_backward,
    dropout,
    dropout_backward,
    maxpool_2x2,
    maxpool_2x2_backward,
    relu,
    relu_backward,
    softmax,
    softmax_cross_entropy,
)
from .streams import (
    CloudArch,
    DepthArch,
    NetParams,
    Prob2,
    cloud_forward,
    depth_forward,
    desk_cloud_arch,
    desk_depth_arch,
    depth_stream_forward,
    fuse,
    init_cloud_params,
    init_depth_params,
    pc_stream_forward,
)
from .training import TrainConfig, adam_step, evaluate_stream, train_stream
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "CloudArch", "DepthArch", "NetParams", "Prob2", "TrainConfig",
    "adam_step", "cloud_forward", "conv2d_3x3", "conv2d_3x3_backward",
    "dense", "dense_backward", "depth_forward", "depth_stream_forward",
    "desk_cloud_arch", "desk_depth_arch", "dropout", "dropout_backward",
    "evaluate_stream", "fuse", "init_cloud_params", "init_depth_params",
    "load_checkpoint", "maxpool_2x2", "maxpool_2x2_backward",
    "pc_stream_forward", "relu", "relu_backward", "save_checkpoint",
    "softmax", "softmax_cross_entropy", "train_stream",
]
