"""A small tape-free reverse-mode autodiff over numpy arrays.

Each :class:`Tensor` remembers the tensors it was computed from and a
closure that pushes its gradient back to them. :func:`backward` walks the
graph in reverse topological order. Only the operations the behavior model
needs are provided.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from mbl.nn import kernels


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        name: str | None = None,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
    ):
        self.value = np.asarray(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _result(value: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    tracked = tuple(p for p in parents if p.requires_grad)
    if not tracked:
        return Tensor(value)
    return Tensor(value, requires_grad=True, parents=tracked, backward_fn=backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.value.size != 1 and grad is None:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {}
    seed = np.ones_like(loss.value) if grad is None else np.asarray(grad, dtype=loss.dtype)
    grads[id(loss)] = seed
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._accumulate(g)
            continue
        for parent, pg in node._backward(g):
            if pg is None:
                continue
            if parent._backward is None:
                parent._accumulate(pg)
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _result(a.value + b.value, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    return _result(a.value - b.value, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return [
            (a, _unbroadcast(g * b.value, a.shape) if a.requires_grad else None),
            (b, _unbroadcast(g * a.value, b.shape) if b.requires_grad else None),
        ]

    return _result(a.value * b.value, (a, b), bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        return [(a, 2.0 * a.value * g)]

    return _result(a.value * a.value, (a,), bw)


def absolute(a: Tensor) -> Tensor:
    def bw(g):
        return [(a, np.sign(a.value) * g)]

    return _result(np.abs(a.value), (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0

    def bw(g):
        return [(a, g * mask)]

    return _result(np.maximum(a.value, 0), (a,), bw)


def softplus(a: Tensor) -> Tensor:
    x = a.value
    out = np.logaddexp(0.0, x).astype(a.dtype, copy=False)

    def bw(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return [(a, g * sig)]

    return _result(out, (a,), bw)


def activate(a: Tensor, activation: str) -> Tensor:
    if activation == "relu":
        return relu(a)
    if activation == "softplus":
        return softplus(a)
    if activation in ("linear", "none", None):
        return a
    raise ValueError(f"unknown activation {activation!r}")


# ---------------------------------------------------------------- reductions


def sum_(a: Tensor, axis=None) -> Tensor:
    def bw(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        return [(a, np.broadcast_to(gg, a.shape))]

    return _result(np.asarray(a.value.sum(axis=axis)), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.value.size if axis is None else a.value.shape[axis]

    def bw(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        return [(a, np.broadcast_to(gg / n, a.shape))]

    return _result(np.asarray(a.value.mean(axis=axis)), (a,), bw)


# ---------------------------------------------------------------- structure


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            out.append((t, g[tuple(idx)]))
        return out

    return _result(np.concatenate([t.value for t in tensors], axis=axis), tensors, bw)


def slice_last(a: Tensor, lo: int, hi: int) -> Tensor:
    """Channel slice ``a[..., lo:hi]``."""

    def bw(g):
        full = np.zeros_like(a.value)
        full[..., lo:hi] = g
        return [(a, full)]

    return _result(a.value[..., lo:hi], (a,), bw)


def gather_frames(a: Tensor, rows: np.ndarray, times: np.ndarray) -> Tensor:
    """Pick ``a[rows[m], times[m], :]`` for each m; ``a`` is (N, T, C)."""
    rows = np.asarray(rows, dtype=np.intp)
    times = np.asarray(times, dtype=np.intp)

    def bw(g):
        full = np.zeros_like(a.value)
        np.add.at(full, (rows, times), g)
        return [(a, full)]

    return _result(a.value[rows, times], (a,), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bw(g):
        return [(a, g.reshape(a.shape))]

    return _result(a.value.reshape(shape), (a,), bw)


def stop_gradient(a: Tensor) -> Tensor:
    """Identity forward; the result is a constant, so nothing flows back."""
    value = a.value.copy()
    if _freeze is not None:
        value = _freeze.replay(value)
    return Tensor(value)


_freeze: "StopGradientFreeze | None" = None


class StopGradientFreeze:
    """Hold every stop_gradient output at the value it had on the first run.

    ``run(f)`` evaluates ``f``; the n-th stop_gradient call inside it returns
    whatever the n-th call returned during the first ``run``. Finite
    differences taken through ``run`` therefore see the same surrogate
    objective that :func:`backward` differentiates.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self._cursor = 0

    def replay(self, value: np.ndarray) -> np.ndarray:
        i = self._cursor
        self._cursor += 1
        if i == len(self.values):
            self.values.append(value)
            return value
        if self.values[i].shape != value.shape:
            raise RuntimeError(f"stop_gradient call {i} changed shape between runs")
        return self.values[i].copy()

    def run(self, f: Callable[[], Tensor]) -> Tensor:
        global _freeze
        prev, _freeze, self._cursor = _freeze, self, 0
        try:
            return f()
        finally:
            _freeze = prev


# ---------------------------------------------------------------- layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"linear: input has {x.shape[-1]} features but weight expects {weight.shape[1]} "
            f"(x {x.shape}, weight {weight.shape})"
        )
    out = x.value @ weight.value.T
    if bias is not None:
        out = out + bias.value
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        res = []
        if x.requires_grad:
            res.append((x, g @ weight.value))
        if weight.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            res.append((weight, g2.T @ x.value.reshape(-1, x.shape[-1])))
        if bias is not None and bias.requires_grad:
            res.append((bias, g.reshape(-1, g.shape[-1]).sum(axis=0)))
        return res

    return _result(out, parents, bw)


def causal_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None, dilation: int) -> Tensor:
    """Causal dilated convolution over time.

    ``x`` is (batch, time, in) or (time, in); ``weight`` is (out, in, kernel).
    ``out[t] = sum_i W[:, :, i] @ x[t - (k-1-i)*dilation]`` with zeros before
    the first frame, so the output keeps all ``time`` frames.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    squeeze = x.value.ndim == 2
    xv = x.value[None] if squeeze else x.value
    if xv.ndim != 3 or weight.value.ndim != 3 or xv.shape[2] != weight.shape[1]:
        raise ValueError(
            f"causal_conv1d shape mismatch: input {x.shape} vs weight {weight.shape} "
            "(expected input (..., time, C_in) and weight (C_out, C_in, k))"
        )
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    dtype = np.result_type(xv.dtype, weight.dtype)
    xc = np.ascontiguousarray(xv, dtype=dtype)
    wt = np.ascontiguousarray(weight.value.transpose(2, 1, 0), dtype=dtype)
    out = np.zeros((xc.shape[0], xc.shape[1], weight.shape[0]), dtype=dtype)
    kernels.conv_forward(xc, wt, out, int(dilation))
    if bias is not None:
        out += bias.value
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g3 = np.ascontiguousarray(g[None] if squeeze else g, dtype=dtype)
        gx = np.zeros_like(xc)
        gwt = np.zeros_like(wt)
        kernels.conv_backward(xc, wt, g3, gx, gwt, int(dilation), bool(x.requires_grad))
        res = []
        if x.requires_grad:
            res.append((x, gx[0] if squeeze else gx))
        if weight.requires_grad:
            res.append((weight, gwt.transpose(2, 1, 0)))
        if bias is not None and bias.requires_grad:
            res.append((bias, g3.sum(axis=(0, 1))))
        return res

    return _result(out[0] if squeeze else out, parents, bw)


def l2_normalize(v: Tensor, epsilon: float = 1e-8) -> Tensor:
    """Row-wise ``v / max(||v||_2, epsilon)`` over the last axis."""
    v = as_tensor(v)
    norm = np.sqrt((v.value * v.value).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, epsilon)
    u = v.value / denom
    above = norm >= epsilon

    def bw(g):
        # below epsilon the denominator is constant
        proj = np.where(above, (u * g).sum(axis=-1, keepdims=True), 0.0)
        return [(v, (g - u * proj) / denom)]

    return _result(u, (v,), bw)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
