"""Minimal numpy neural-network engine: layers with explicit backward passes."""

from .functional import (
    batchnorm_infer,
    batchnorm_train,
    conv2d,
    conv2d_transpose,
    dense,
    dropout,
    leaky_relu,
    maxpool2,
    mse_loss,
    mse_loss_grad,
    same_padding,
)
from .layers import (
    BackwardBeforeForward,
    BatchNorm,
    Conv2D,
    Conv2DTranspose,
    Dense,
    Dropout,
    Flatten,
    Layer,
    LeakyReLU,
    MaxPool2,
    Reshape,
    Sequential,
)

__all__ = [
    "BackwardBeforeForward",
    "BatchNorm",
    "Conv2D",
    "Conv2DTranspose",
    "Dense",
    "Dropout",
    "Flatten",
    "Layer",
    "LeakyReLU",
    "MaxPool2",
    "Reshape",
    "Sequential",
    "batchnorm_infer",
    "batchnorm_train",
    "conv2d",
    "conv2d_transpose",
    "dense",
    "dropout",
    "leaky_relu",
    "maxpool2",
    "mse_loss",
    "mse_loss_grad",
    "same_padding",
]
