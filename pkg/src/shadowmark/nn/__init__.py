"""Minimal numpy differentiable substrate: layers, networks, gradients, Adam."""

from .layers import DTYPE, LAYER_KINDS, Layer, layer_from_dict
from .layers import (
    BatchReshape,
    Conv2d,
    Dense,
    LeakyReLU,
    ReLU,
    Sigmoid,
    Tanh,
    TransposeConv2d,
    UpsampleNearest,
)
from .network import Chain, Network, Parameter, check_loss, compute_gradients, forward
from .optim import Adam, AdamState, apply_update
from .gradcheck import finite_difference_grads, max_relative_error

__all__ = [
    "DTYPE",
    "LAYER_KINDS",
    "Layer",
    "layer_from_dict",
    "BatchReshape",
    "Conv2d",
    "Dense",
    "LeakyReLU",
    "ReLU",
    "Sigmoid",
    "Tanh",
    "TransposeConv2d",
    "UpsampleNearest",
    "Chain",
    "Network",
    "Parameter",
    "check_loss",
    "compute_gradients",
    "forward",
    "Adam",
    "AdamState",
    "apply_update",
    "finite_difference_grads",
    "max_relative_error",
]
