"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Every op records its parents and a backward rule on the output tensor. Node
ids come from a monotone counter, so sorting the reachable graph by id gives
the recording order; ``backward`` walks it in exact reverse.

Gradients accumulate into ``Tensor.grad`` of leaves until ``zero_grad`` is
called, which is what the optimizer loop expects.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import ConfigError, NumericError, ShapeError, UsageError

_node_ids = itertools.count()
_local = threading.local()

# tanh-approximate GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
GELU_C = float(np.sqrt(2.0 / np.pi))
GELU_A = 0.044715

STD_EPS = 1e-8


def is_grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._id = next(_node_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn):
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf with requires_grad."""
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor with requires_grad")
    nodes = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        stack.extend(p for p in node._parents if p.requires_grad)
    grads = {loss._id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        ),
    )


def square(x):
    x = as_tensor(x)
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def gelu(x):
    """tanh-approximate GELU (constants ``GELU_C``, ``GELU_A``)."""
    x = as_tensor(x)
    xd = x.data.reshape(-1) if x.ndim == 0 else x.data  # in-place ops need an array
    x2 = xd * xd
    th = x2 * GELU_A
    th += 1.0
    th *= xd
    th *= GELU_C
    np.tanh(th, out=th)
    out = th + 1.0
    out *= xd
    out *= 0.5

    def _bw(g):
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) C (1 + 3 A x^2)
        du = x2 * (3.0 * GELU_A)
        du += 1.0
        du *= GELU_C
        sech2 = th * th
        np.subtract(1.0, sech2, out=sech2)
        sech2 *= xd
        sech2 *= du
        sech2 += th
        sech2 += 1.0
        sech2 *= 0.5
        sech2 *= np.reshape(g, sech2.shape)
        return (sech2.reshape(x.shape),)

    return _result(out.reshape(x.shape), (x,), _bw)


def sigmoid(x):
    x = as_tensor(x)
    s = expit(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def stop_gradient(x):
    """Same value as ``x``; no gradient flows back through this edge."""
    return Tensor(as_tensor(x).data)


def dropout(x, p, training, rng=None):
    """Inverted dropout: survivors are scaled by 1/(1-p); identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), _bw)


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x, index):
    x = as_tensor(x)
    shape = x.shape

    def _bw(g):
        full = np.zeros(shape)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _result(x.data[index], (x,), _bw)


def _is_fancy(index):
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), _bw)


def concat_channels(tensors):
    """Concatenate (B, n_i, L) tensors along the channel axis."""
    return concat(tensors, axis=1)


def pad_time(x, front, back):
    """Zero-pad the last axis."""
    x = as_tensor(x)
    if front == 0 and back == 0:
        return x
    L = x.shape[-1]
    widths = [(0, 0)] * (x.ndim - 1) + [(front, back)]
    return _result(np.pad(x.data, widths), (x,), lambda g: (g[..., front : front + L],))


def mean_over_time(x):
    """Mean over the last (time) axis, kept as a length-1 axis."""
    return tmean(x, axis=-1, keepdims=True)


def std_over_time(x, eps=STD_EPS):
    """Population std over the last axis (divide by L), floored at ``eps``.

    Where the floor is active the gradient is zero, so constant channels do
    not produce 0/0.
    """
    x = as_tensor(x)
    xd = x.data
    L = xd.shape[-1]
    centered = xd - xd.mean(axis=-1, keepdims=True)
    raw = np.sqrt((centered * centered).mean(axis=-1, keepdims=True))
    active = raw > eps if eps > 0 else np.ones_like(raw, dtype=bool)
    out = np.where(active, raw, eps)

    def _bw(g):
        safe = np.where(active, raw, 1.0)
        return (np.where(active, g / safe, 0.0) * centered / L,)

    return _result(out, (x,), _bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def _bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if ad.ndim > 2 and bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), _bw)


def affine(x, W, b=None):
    """y = x W + b, broadcast over leading dims of ``x``."""
    x, W = as_tensor(x), as_tensor(W)
    if x.ndim < 1 or W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"affine: x{x.shape} incompatible with W{W.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeError(f"affine: bias {b.shape} does not match W{W.shape}")
    squeeze = x.ndim == 1
    xin = reshape(x, (1, x.shape[0])) if squeeze else x
    y = matmul(xin, W)
    if b is not None:
        y = add(y, b)
    return reshape(y, (W.shape[1],)) if squeeze else y


def conv1d(x, w, b=None, pad=0, stride=1, groups=1):
    """Grouped, strided, zero-padded 1D cross-correlation (no kernel flip).

    x: (B, C_in, L); w: (C_out, C_in // groups, K); b: (C_out,) or None.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d expects 3-D x and w, got {x.shape} and {w.shape}")
    B, C_in, L = x.shape
    C_out, cig, K = w.shape
    if groups < 1 or C_in % groups or C_out % groups:
        raise ConfigError(f"conv1d groups={groups} must divide C_in={C_in} and C_out={C_out}")
    if cig != C_in // groups:
        raise ShapeError(f"conv1d weight {w.shape} expects {cig * groups} input channels, got {C_in}")
    if stride < 1 or pad < 0:
        raise ConfigError(f"conv1d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    Lp = L + 2 * pad
    L_out = (Lp - K) // stride + 1 if Lp >= K else 0
    if L_out < 1:
        raise ShapeError(f"conv1d output length {L_out} < 1 (L={L}, K={K}, pad={pad}, stride={stride})")
    xp = np.ascontiguousarray(np.pad(x.data, ((0, 0), (0, 0), (pad, pad))) if pad else x.data)
    wd = np.ascontiguousarray(w.data)
    out = kernels.conv1d_forward(xp, wd, stride, groups)
    parents = (x, w) if b is None else (x, w, as_tensor(b))
    if b is not None:
        out = out + parents[2].data[None, :, None]

    def _bw(g):
        g = np.ascontiguousarray(g)
        gx = gw = None
        if x.requires_grad:
            gx = kernels.conv1d_backward_input(g, wd, Lp, stride, groups)[:, :, pad : pad + L]
        if w.requires_grad:
            gw = kernels.conv1d_backward_weight(g, xp, K, stride, groups)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return _result(out, parents, _bw)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def numerical_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x.data``."""
    flat = x.data.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f().data)
        flat[i] = orig - h
        fm = float(f().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def grad_check(f, x, h=1e-5, floor=1e-8):
    """Max relative error between the AD gradient and central differences.

    ``f`` is called with no arguments and must read ``x`` (mutated in place).
    Relative error uses denominator max(|g|, |g_fd|, floor); raise ``floor``
    when entries with near-zero gradient would only measure rounding noise
    of the finite differences.
    """
    prev = x.requires_grad
    x.requires_grad = True
    x.grad = None
    loss = f()
    backward(loss)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    x.grad = None
    x.requires_grad = prev
    with no_grad():
        numeric = numerical_grad(f, x, h)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise NumericError("grad_check encountered non-finite gradients")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0
