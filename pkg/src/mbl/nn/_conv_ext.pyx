# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled causal dilated convolution kernels.

Arrays are frame-major: x is (batch, time, in_channels), outputs are
(batch, time, out_channels). Weights are passed pre-transposed as
(kernel, in_channels, out_channels), C-contiguous. Every tap is a single
GEMM on a contiguous time block, so no shifted copies are materialised.
"""

from cython cimport floating
from scipy.linalg.cython_blas cimport dgemm, sgemm


cdef inline void _gemm(char *ta, char *tb, int m, int n, int k,
                       floating *a, int lda, floating *b, int ldb,
                       floating *c, int ldc) noexcept nogil:
    cdef double done = 1.0
    cdef float sone = 1.0
    if floating is double:
        dgemm(ta, tb, &m, &n, &k, &done, a, &lda, b, &ldb, &done, c, &ldc)
    else:
        sgemm(ta, tb, &m, &n, &k, &sone, a, &lda, b, &ldb, &sone, c, &ldc)


def conv_forward(floating[:, :, ::1] x, floating[:, :, ::1] wt,
                 floating[:, :, ::1] out, int dilation):
    """Accumulate the causal convolution of ``x`` into ``out`` (no bias)."""
    cdef int nb = x.shape[0], nt = x.shape[1], cin = x.shape[2]
    cdef int k = wt.shape[0], cout = wt.shape[2]
    cdef int b, i, shift, n
    with nogil:
        for b in range(nb):
            for i in range(k):
                shift = (k - 1 - i) * dilation
                n = nt - shift
                if n <= 0:
                    continue
                _gemm(b"N", b"N", cout, n, cin,
                      &wt[i, 0, 0], cout, &x[b, 0, 0], cin,
                      &out[b, shift, 0], cout)


def conv_backward(floating[:, :, ::1] x, floating[:, :, ::1] wt,
                  floating[:, :, ::1] gout, floating[:, :, ::1] gx,
                  floating[:, :, ::1] gwt, int dilation, bint need_gx):
    """Accumulate input and weight gradients into ``gx`` and ``gwt``."""
    cdef int nb = x.shape[0], nt = x.shape[1], cin = x.shape[2]
    cdef int k = wt.shape[0], cout = wt.shape[2]
    cdef int b, i, shift, n
    with nogil:
        for b in range(nb):
            for i in range(k):
                shift = (k - 1 - i) * dilation
                n = nt - shift
                if n <= 0:
                    continue
                if need_gx:
                    _gemm(b"T", b"N", cin, n, cout,
                          &wt[i, 0, 0], cout, &gout[b, shift, 0], cout,
                          &gx[b, 0, 0], cin)
                _gemm(b"N", b"T", cout, cin, n,
                      &gout[b, shift, 0], cout, &x[b, 0, 0], cin,
                      &gwt[i, 0, 0], cout)
