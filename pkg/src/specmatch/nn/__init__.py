"""Minimal 1-D convolutional network stack in numpy."""

from .gradcheck import check_network_gradients, numerical_gradient, relative_error
from .layers import (
    BatchNorm,
    Conv,
    Dense,
    Flatten,
    LeakyReLU,
    MaxPool,
    batchnorm_forward,
    conv1d_forward,
    dense_forward,
    leakyrelu_forward,
    maxpool_backward,
    maxpool_forward,
)
from .network import Network, infer_shapes, xavier_bound, xavier_init
from .optim import AdamState, adam_step

__all__ = [
    "AdamState",
    "BatchNorm",
    "Conv",
    "Dense",
    "Flatten",
    "LeakyReLU",
    "MaxPool",
    "Network",
    "adam_step",
    "batchnorm_forward",
    "check_network_gradients",
    "conv1d_forward",
    "dense_forward",
    "infer_shapes",
    "leakyrelu_forward",
    "maxpool_backward",
    "maxpool_forward",
    "numerical_gradient",
    "relative_error",
    "xavier_bound",
    "xavier_init",
]
