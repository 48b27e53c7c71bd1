"""Minimal differentiable numerics for causal temporal convolution models."""

from mbl.nn.autodiff import (
    StopGradientFreeze,
    Tensor,
    absolute,
    add,
    backward,
    causal_conv1d,
    concat,
    gather_frames,
    l2_normalize,
    linear,
    mean,
    mul,
    relu,
    slice_last,
    softplus,
    square,
    stop_gradient,
    sub,
    sum_,
)
from mbl.nn.gradcheck import grad_check, numeric_gradient, relative_error
from mbl.nn.kernels import BACKEND
from mbl.nn.layers import (
    ConvLayerSpec,
    DenseLayerSpec,
    conv_stack_forward,
    init_conv,
    init_dense,
    mlp_forward,
    mlp_specs,
    receptive_field,
)

__all__ = [
    "StopGradientFreeze",
    "BACKEND",
    "ConvLayerSpec",
    "DenseLayerSpec",
    "Tensor",
    "absolute",
    "add",
    "backward",
    "causal_conv1d",
    "concat",
    "conv_stack_forward",
    "gather_frames",
    "grad_check",
    "init_conv",
    "init_dense",
    "l2_normalize",
    "linear",
    "mean",
    "mlp_forward",
    "mlp_specs",
    "mul",
    "numeric_gradient",
    "receptive_field",
    "relative_error",
    "relu",
    "slice_last",
    "softplus",
    "square",
    "stop_gradient",
    "sub",
    "sum_",
]
