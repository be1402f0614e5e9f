"""Numpy tensor core with reverse-mode (and second-order) differentiation."""

from .functional import (
    activation,
    conv_forward,
    deconv_forward,
    dense_forward,
    leaky_relu,
    padding_amount,
    relu,
)
from .optim import Adam, AdamState, adam_step
from .engine import (
    GradientMap,
    Tensor,
    backward,
    concatenate,
    enable_grad,
    grad,
    input_gradient_node,
    is_grad_enabled,
    no_grad,
    ones,
    sample_norm,
    stack,
    tensor,
    zeros,
)

__all__ = [
    "Adam",
    "AdamState",
    "GradientMap",
    "Tensor",
    "activation",
    "adam_step",
    "backward",
    "concatenate",
    "conv_forward",
    "deconv_forward",
    "dense_forward",
    "enable_grad",
    "grad",
    "input_gradient_node",
    "is_grad_enabled",
    "leaky_relu",
    "no_grad",
    "ones",
    "padding_amount",
    "relu",
    "sample_norm",
    "stack",
    "tensor",
    "zeros",
]
