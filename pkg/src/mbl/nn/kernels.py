"""Causal dilated convolution kernels with compiled/numpy dispatch.

The compiled extension is used when it imports and ``MBL_PURE_PYTHON`` is
unset. Both backends share one calling convention: ``wt`` is the weight
re-laid out as (kernel, in_channels, out_channels) and results are
accumulated into caller-provided buffers.
"""

from __future__ import annotations

import os

import numpy as np


def conv_forward_numpy(x: np.ndarray, wt: np.ndarray, out: np.ndarray, dilation: int) -> None:
    k = wt.shape[0]
    nt = x.shape[1]
    for i in range(k):
        shift = (k - 1 - i) * dilation
        if shift >= nt:
            continue
        out[:, shift:, :] += x[:, : nt - shift, :] @ wt[i]


def conv_backward_numpy(
    x: np.ndarray,
    wt: np.ndarray,
    gout: np.ndarray,
    gx: np.ndarray,
    gwt: np.ndarray,
    dilation: int,
    need_gx: bool,
) -> None:
    k = wt.shape[0]
    nt, cin = x.shape[1], x.shape[2]
    cout = gout.shape[2]
    for i in range(k):
        shift = (k - 1 - i) * dilation
        if shift >= nt:
            continue
        g = gout[:, shift:, :]
        if need_gx:
            gx[:, : nt - shift, :] += g @ wt[i].T
        xs = x[:, : nt - shift, :].reshape(-1, cin)
        gwt[i] += xs.T @ g.reshape(-1, cout)


def _load_compiled():
    if os.environ.get("MBL_PURE_PYTHON"):
        return None
    try:
        from mbl.nn import _conv_ext
    except ImportError:
        return None
    return _conv_ext


_ext = _load_compiled()

BACKEND = "compiled" if _ext is not None else "numpy"

if _ext is not None:
    conv_forward = _ext.conv_forward
    conv_backward = _ext.conv_backward
else:
    conv_forward = conv_forward_numpy
    conv_backward = conv_backward_numpy


def compiled_available() -> bool:
    return _ext is not None
