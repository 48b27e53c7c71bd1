"""Layer specs, initialisation and forward passes built on the autodiff ops."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from mbl.nn import autodiff as ad
from mbl.nn.autodiff import Tensor

Params = dict[str, Tensor]


@dataclass(frozen=True)
class ConvLayerSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    dilation: int = 1
    activation: str = "relu"

    def __post_init__(self):
        for field in ("in_channels", "out_channels", "kernel_size", "dilation"):
            value = getattr(self, field)
            if int(value) != value or value < 1:
                raise ValueError(f"ConvLayerSpec.{field} must be a positive integer, got {value!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DenseLayerSpec:
    in_features: int
    out_features: int
    activation: str = "relu"

    def to_dict(self) -> dict:
        return asdict(self)


def mlp_specs(in_dim: int, hidden: Sequence[int], out_dim: int, activation: str = "relu") -> list[DenseLayerSpec]:
    """Hidden layers use ``activation``; the final layer is linear."""
    dims = [in_dim, *hidden, out_dim]
    return [
        DenseLayerSpec(a, b, activation if i < len(dims) - 2 else "linear")
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))
    ]


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_conv(rng: np.random.Generator, spec: ConvLayerSpec, prefix: str, dtype=np.float64) -> Params:
    fan_in = spec.in_channels * spec.kernel_size
    shape = (spec.out_channels, spec.in_channels, spec.kernel_size)
    return {
        f"{prefix}.weight": Tensor(_uniform(rng, shape, fan_in, dtype), requires_grad=True, name=f"{prefix}.weight"),
        f"{prefix}.bias": Tensor(_uniform(rng, (spec.out_channels,), fan_in, dtype), requires_grad=True, name=f"{prefix}.bias"),
    }


def init_dense(rng: np.random.Generator, spec: DenseLayerSpec, prefix: str, dtype=np.float64) -> Params:
    shape = (spec.out_features, spec.in_features)
    return {
        f"{prefix}.weight": Tensor(_uniform(rng, shape, spec.in_features, dtype), requires_grad=True, name=f"{prefix}.weight"),
        f"{prefix}.bias": Tensor(_uniform(rng, (spec.out_features,), spec.in_features, dtype), requires_grad=True, name=f"{prefix}.bias"),
    }


def conv_stack_forward(x: Tensor, specs: Sequence[ConvLayerSpec], params: Params, prefix: str) -> Tensor:
    h = x
    for i, spec in enumerate(specs):
        name = f"{prefix}.{i}"
        h = ad.causal_conv1d(h, params[f"{name}.weight"], params[f"{name}.bias"], spec.dilation)
        h = ad.activate(h, spec.activation)
    return h


def mlp_forward(x, specs: Sequence[DenseLayerSpec], params: Params, prefix: str) -> Tensor:
    h = ad.as_tensor(x)
    for i, spec in enumerate(specs):
        if h.shape[-1] != spec.in_features:
            raise ValueError(
                f"mlp {prefix!r} layer {i}: expected {spec.in_features} inputs, got {h.shape[-1]}"
            )
        name = f"{prefix}.{i}"
        h = ad.linear(h, params[f"{name}.weight"], params[f"{name}.bias"])
        h = ad.activate(h, spec.activation)
    return h


def receptive_field(layers: Sequence[ConvLayerSpec]) -> int:
    """Number of frames (including the current one) that can reach an output."""
    if not layers:
        raise ValueError("receptive_field needs at least one layer")
    return 1 + sum((spec.kernel_size - 1) * spec.dilation for spec in layers)
