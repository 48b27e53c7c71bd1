"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from mbl.nn.autodiff import Tensor, backward


def elementwise_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    return float(np.max(elementwise_error(analytic, numeric, floor))) if analytic.size else 0.0


def numeric_gradient(f: Callable[[], Tensor], leaf: Tensor, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(leaf.value, dtype=np.float64)
    flat = leaf.value.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f().value)
        flat[i] = orig - h
        down = float(f().value)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def grad_check(
    f: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    h: float | Sequence[float] = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the graph from the current leaf values and returns a scalar.
    Leaves must be float64; they are perturbed in place and restored.
    With several step sizes each element keeps its best agreement: a large
    step can straddle a ReLU kink and a small one drowns tiny gradients in
    roundoff, but a wrong analytic gradient disagrees at every step.
    """
    steps = (h,) if np.isscalar(h) else tuple(h)
    for leaf in leaves:
        if leaf.value.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 leaves, {leaf.name or leaf} is {leaf.value.dtype}")
        leaf.zero_grad()
    backward(f())
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        if not analytic.size:
            continue
        err = np.min([elementwise_error(analytic, numeric_gradient(f, leaf, step), floor) for step in steps], axis=0)
        worst = max(worst, float(np.max(err)))
    return worst
