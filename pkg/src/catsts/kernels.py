"""Hot conv1d kernels with backend selection at import time.

The compiled backend (``catsts._ext._conv``) is used when it imports; set
``CATSTS_PURE_PYTHON=1`` to force the numpy fallback. With the compiled
backend, weight gradients of dense unit-stride convolutions still go through
numpy, which is faster there. Both backends take
zero-padded, C-contiguous float64 arrays and compute cross-correlation.
"""
import os

import numpy as np


def _split_groups(x, groups):
    B, C, L = x.shape
    return x.reshape(B, groups, C // groups, L)


def _tap(xg, k, stride, L_out):
    return xg[..., k : k + stride * (L_out - 1) + 1 : stride]


def conv1d_forward_numpy(x, w, stride, groups):
    B, _, Lp = x.shape
    C_out, cig, K = w.shape
    L_out = (Lp - K) // stride + 1
    xg = _split_groups(x, groups)
    wg = w.reshape(groups, C_out // groups, cig, K)
    out = np.zeros((B, groups, C_out // groups, L_out))
    for k in range(K):
        out += np.matmul(wg[..., k], _tap(xg, k, stride, L_out))
    return out.reshape(B, C_out, L_out)


def conv1d_backward_input_numpy(grad_out, w, Lp, stride, groups):
    B, C_out, L_out = grad_out.shape
    _, cig, K = w.shape
    gg = _split_groups(grad_out, groups)
    wt = w.reshape(groups, C_out // groups, cig, K).transpose(0, 2, 1, 3)
    gx = np.zeros((B, groups, cig, Lp))
    for k in range(K):
        gx[..., k : k + stride * (L_out - 1) + 1 : stride] += np.matmul(wt[..., k], gg)
    return gx.reshape(B, groups * cig, Lp)


def conv1d_backward_weight_numpy(grad_out, x, K, stride, groups):
    B, C_out, L_out = grad_out.shape
    xg = _split_groups(x, groups)
    gg = _split_groups(grad_out, groups)
    cig = xg.shape[2]
    gw = np.empty((groups, C_out // groups, cig, K))
    for k in range(K):
        gw[..., k] = np.matmul(gg, _tap(xg, k, stride, L_out).swapaxes(-1, -2)).sum(axis=0)
    return gw.reshape(C_out, cig, K)


_NUMPY = (conv1d_forward_numpy, conv1d_backward_input_numpy, conv1d_backward_weight_numpy)

BACKEND = "numpy"
conv1d_forward, conv1d_backward_input, conv1d_backward_weight = _NUMPY

if os.environ.get("CATSTS_PURE_PYTHON") != "1":
    try:
        from catsts._ext import _conv
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        conv1d_forward = _conv.conv1d_forward
        conv1d_backward_input = _conv.conv1d_backward_input

        def conv1d_backward_weight(grad_out, x, K, stride, groups):
            # dense unit-stride weight gradients are one batched matmul per tap, where
            # BLAS beats the compiled loop (see benchmarks/bench_conv.py)
            if groups == 1 and stride == 1:
                return conv1d_backward_weight_numpy(grad_out, x, K, stride, groups)
            return _conv.conv1d_backward_weight(grad_out, x, K, stride, groups)
