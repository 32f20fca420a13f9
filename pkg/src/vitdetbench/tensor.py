"""Minimal dense-tensor engine with reverse-mode autodiff.

Numpy-backed, CPU only. f32 is the working dtype; f64 exists for gradient
checking. Every op is pure: input arrays are never mutated. Arrays retained
for the backward pass are reported to a global activation counter so that
memory-saving strategies (windowed attention, checkpointing) can be measured
in saved elements rather than bytes.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class DimensionError(ValueError):
    """Shape/extent mismatch between operands."""


class InvalidInputError(ValueError):
    """Operand values violate an op precondition."""


class CheckpointError(RuntimeError):
    """Recompute inside a checkpointed segment diverged from the forward pass."""


# --------------------------------------------------------------------------
# grad mode and activation accounting
# --------------------------------------------------------------------------

_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class ActivationCounter:
    """Counts elements of every array saved for backward.

    ``current`` is the number of live saved elements, ``peak`` the maximum
    seen since the last reset, ``total`` the cumulative count. Counts are
    elements, not bytes, so they are dtype-agnostic.
    """

    def __init__(self):
        self.enabled = False
        self.reset()

    def reset(self):
        self.current = 0
        self.peak = 0
        self.total = 0

    def add(self, n: int):
        if self.enabled:
            self.current += n
            self.total += n
            if self.current > self.peak:
                self.peak = self.current

    def release(self, n: int):
        if self.enabled:
            self.current -= n


counter = ActivationCounter()


@contextmanager
def track_activations():
    """Reset and enable the saved-activation counter for the enclosed region."""
    prev = counter.enabled
    counter.reset()
    counter.enabled = True
    try:
        yield counter
    finally:
        counter.enabled = prev


def _count_saved(*arrays) -> int:
    n = sum(a.size for a in arrays if isinstance(a, np.ndarray))
    counter.add(n)
    return n


# --------------------------------------------------------------------------
# Tensor
# --------------------------------------------------------------------------

def _as_array(data, dtype):
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """Dense n-d array with optional gradient tracking.

    ``grad`` accumulates across backward() calls until ``zero_grad`` resets
    it; this matches the usual gradient-accumulation convention.
    """

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_prev", "_op", "_saved_elems")

    def __init__(self, data, requires_grad=False, dtype=None, _prev=(), _op=""):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._prev = _prev
        self._op = _op
        self._saved_elems = 0

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accum_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- autodiff machinery ---------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every requires_grad tensor reachable from a scalar loss."""
        if self.data.size != 1:
            raise InvalidInputError("backward() requires a scalar loss")
        _run_backward(self, np.ones_like(self.data))

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other, self))

    def __rsub__(self, other):
        return add(_wrap(other, self), -self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, pow_(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_wrap(other, self), pow_(self, -1.0))

    def __pow__(self, p):
        return pow_(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sqrt(self):
        return pow_(self, 0.5)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _run_backward(root: Tensor, seed: np.ndarray):
    topo, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in visited:
                stack.append((p, False))
    root._accum_grad(seed)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if node._prev:
            node.grad = None  # intermediate: free once consumed; leaves keep theirs


def _make(data, parents, backward, op="", saved=()):
    """Build an output tensor; registers backward only when grad is on."""
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _prev=tuple(parents) if req else (), _op=op)
    if req:
        out._backward = backward
        out._saved_elems = _count_saved(*saved)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# elementwise and reduction primitives
# --------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)

    def backward(g):
        if a.requires_grad or a._prev:
            a._accum_grad(_unbroadcast(g, a.shape))
        if b.requires_grad or b._prev:
            b._accum_grad(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)

    def backward(g):
        if a.requires_grad or a._prev:
            a._accum_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad or b._prev:
            b._accum_grad(_unbroadcast(g * a.data, b.shape))

    saved = []
    if _grad_enabled:
        if a.requires_grad or a._prev:
            saved.append(b.data)
        if b.requires_grad or b._prev:
            saved.append(a.data)
    return _make(a.data * b.data, (a, b), backward, "mul", saved=saved)


def pow_(a: Tensor, p: float) -> Tensor:
    def backward(g):
        a._accum_grad(g * p * np.power(a.data, p - 1.0))

    return _make(np.power(a.data, p), (a,), backward, "pow", saved=(a.data,))


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        a._accum_grad(g * out_data)

    return _make(out_data, (a,), backward, "exp", saved=(out_data,))


def log(a: Tensor) -> Tensor:
    def backward(g):
        a._accum_grad(g / a.data)

    return _make(np.log(a.data), (a,), backward, "log", saved=(a.data,))


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        a._accum_grad(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward, "tanh", saved=(out_data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        a._accum_grad(g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), backward, "relu", saved=(mask,))


_GELU_C = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715  # tanh-approximation constant


def gelu(a: Tensor) -> Tensor:
    """GeLU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""
    x = a.data
    u = _GELU_C * (x + GELU_CUBIC * x ** 3)
    t = np.tanh(u)

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * GELU_CUBIC * x * x)
        a._accum_grad(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _make(0.5 * x * (1.0 + t), (a,), backward, "gelu", saved=(x,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise InvalidInputError(f"softmax axis {axis} out of range for ndim {a.ndim}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        gy = g * out_data
        a._accum_grad(gy - out_data * gy.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), backward, "softmax", saved=(out_data,))


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is None:
            a._accum_grad(np.broadcast_to(g, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accum_grad(np.broadcast_to(gg, a.shape).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else (
        np.prod([a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]))
    return sum_(a, axis, keepdims) * (1.0 / float(n))


def maximum(a: Tensor, scalar: float) -> Tensor:
    mask = a.data > scalar

    def backward(g):
        a._accum_grad(g * mask)

    return _make(np.maximum(a.data, scalar), (a,), backward, "maximum", saved=(mask,))


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def backward(g):
        a._accum_grad(g * sign)

    return _make(np.abs(a.data), (a,), backward, "abs", saved=(sign,))


# --------------------------------------------------------------------------
# shape primitives
# --------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        a._accum_grad(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def backward(g):
        a._accum_grad(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward, "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accum_grad(full)

    return _make(a.data[idx].copy(), (a,), backward, "getitem")


def pad(a: Tensor, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` per numpy convention."""
    slices = tuple(slice(lo, lo + s) for (lo, _), s in zip(pad_width, a.shape))

    def backward(g):
        a._accum_grad(g[slices])

    return _make(np.pad(a.data, pad_width), (a,), backward, "pad")


def concat(tensors, axis=0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accum_grad(g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def gather(table: Tensor, idx: np.ndarray, axis: int = -1) -> Tensor:
    """Fancy-index lookup along ``axis`` with scatter-add gradient."""
    sl = [slice(None)] * table.ndim
    sl[axis] = idx
    sl = tuple(sl)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, sl, g)
        table._accum_grad(full)

    return _make(table.data[sl].copy(), (table,), backward, "gather")


# --------------------------------------------------------------------------
# matmul
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise DimensionError("matmul operands must share a dtype")

    def backward(g):
        if a.requires_grad or a._prev:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accum_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad or b._prev:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accum_grad(_unbroadcast(gb, b.shape))

    saved = []
    if _grad_enabled:
        if a.requires_grad or a._prev:
            saved.append(b.data)
        if b.requires_grad or b._prev:
            saved.append(a.data)
    return _make(np.matmul(a.data, b.data), (a, b), backward, "matmul", saved=saved)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b with w of shape [in, out]."""
    out = matmul(x, w)
    if b is not None:
        out = out + b
    return out


# --------------------------------------------------------------------------
# convolution family
# --------------------------------------------------------------------------

def _conv_out_extent(size, k, stride, pad_):
    return (size + 2 * pad_ - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation. x: [N,C,H,W], w: [K,C,kh,kw]."""
    N, C, H, W = x.shape
    K, Cw, kh, kw = w.shape
    if Cw != C:
        raise DimensionError(f"conv2d channel mismatch: x has {C}, w expects {Cw}")
    Ho = _conv_out_extent(H, kh, stride, padding)
    Wo = _conv_out_extent(W, kw, stride, padding)
    if Ho <= 0 or Wo <= 0:
        raise DimensionError(f"conv2d output extent non-positive: {Ho}x{Wo}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_data = np.einsum("nchwab,kcab->nkhw", win, w.data, optimize=True)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, K, 1, 1)

    def backward(g):
        if w.requires_grad or w._prev:
            gw = np.einsum("nkhw,nchwab->kcab", g, win, optimize=True)
            w._accum_grad(gw)
        if bias is not None and (bias.requires_grad or bias._prev):
            bias._accum_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad or x._prev:
            gx = np.zeros_like(xp)
            for a_ in range(kh):
                for b_ in range(kw):
                    t = np.einsum("nkhw,kc->nchw", g, w.data[:, :, a_, b_], optimize=True)
                    gx[:, :, a_:a_ + stride * Ho:stride, b_:b_ + stride * Wo:stride] += t
            if padding:
                gx = gx[:, :, padding:padding + H, padding:padding + W]
            x._accum_grad(gx)

    parents = (x, w) if bias is None else (x, w, bias)
    saved = []
    if _grad_enabled:
        if w.requires_grad or w._prev:
            saved.append(x.data)
        if x.requires_grad or x._prev:
            saved.append(w.data)
    return _make(out_data, parents, backward, "conv2d", saved=saved)


def conv_transpose2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Transposed conv (adjoint of conv2d). x: [N,C,H,W], w: [C,K,kh,kw]."""
    if stride < 1:
        raise InvalidInputError("conv_transpose2d stride must be >= 1")
    N, C, H, W = x.shape
    Cw, K, kh, kw = w.shape
    if Cw != C:
        raise DimensionError(f"conv_transpose2d channel mismatch: x has {C}, w expects {Cw}")
    Ho = (H - 1) * stride + kh
    Wo = (W - 1) * stride + kw

    out_data = np.zeros((N, K, Ho, Wo), dtype=x.data.dtype)
    for a_ in range(kh):
        for b_ in range(kw):
            out_data[:, :, a_:a_ + stride * H:stride, b_:b_ + stride * W:stride] += np.einsum(
                "nchw,ck->nkhw", x.data, w.data[:, :, a_, b_], optimize=True)
    if bias is not None:
        out_data += bias.data.reshape(1, K, 1, 1)

    def backward(g):
        if x.requires_grad or x._prev:
            gx = np.zeros_like(x.data)
            for a_ in range(kh):
                for b_ in range(kw):
                    gs = g[:, :, a_:a_ + stride * H:stride, b_:b_ + stride * W:stride]
                    gx += np.einsum("nkhw,ck->nchw", gs, w.data[:, :, a_, b_], optimize=True)
            x._accum_grad(gx)
        if w.requires_grad or w._prev:
            gw = np.empty_like(w.data)
            for a_ in range(kh):
                for b_ in range(kw):
                    gs = g[:, :, a_:a_ + stride * H:stride, b_:b_ + stride * W:stride]
                    gw[:, :, a_, b_] = np.einsum("nchw,nkhw->ck", x.data, gs, optimize=True)
            w._accum_grad(gw)
        if bias is not None and (bias.requires_grad or bias._prev):
            bias._accum_grad(g.sum(axis=(0, 2, 3)))

    parents = (x, w) if bias is None else (x, w, bias)
    saved = []
    if _grad_enabled:
        if w.requires_grad or w._prev:
            saved.append(x.data)
        if x.requires_grad or x._prev:
            saved.append(w.data)
    return _make(out_data, parents, backward, "conv_transpose2d", saved=saved)


def maxpool2d(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling with k == stride; gradient routes to the first max per window."""
    stride = k if stride is None else stride
    if stride != k:
        raise InvalidInputError("maxpool2d supports k == stride only")
    N, C, H, W = x.shape
    if H % k or W % k:
        raise DimensionError(f"maxpool2d extents {H}x{W} not divisible by {k}")
    Ho, Wo = H // k, W // k
    win = x.data.reshape(N, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho, Wo, k * k)
    arg = win.argmax(axis=-1)  # first index on ties
    out_data = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(N, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H, W)
        x._accum_grad(gx)

    return _make(out_data, (x,), backward, "maxpool2d", saved=(arg,))


def nearest_upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsample of [N,C,H,W]."""
    N, C, H, W = x.shape

    def backward(g):
        gx = g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5))
        x._accum_grad(gx)

    return _make(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3), (x,), backward, "nearest_upsample2x")


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------

def _norm_stats(x: Tensor, axes, eps):
    mu = mean(x, axis=axes, keepdims=True)
    xc = x - mu
    var = mean(xc * xc, axis=axes, keepdims=True)
    return xc * pow_(var + eps, -0.5)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then affine."""
    if x.shape[-1] == 0:
        raise InvalidInputError("layer_norm over an empty axis")
    return _norm_stats(x, -1, eps) * weight + bias


def group_norm(x: Tensor, num_groups: int, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize [N,C,H,W] over (C/G, H, W) groups, then per-channel affine."""
    N, C, H, W = x.shape
    if C % num_groups:
        raise InvalidInputError(f"channels {C} not divisible by groups {num_groups}")
    if H * W * (C // num_groups) == 0:
        raise InvalidInputError("group_norm over an empty set")
    xg = reshape(x, (N, num_groups, C // num_groups, H, W))
    y = _norm_stats(xg, (2, 3, 4), eps)
    y = reshape(y, (N, C, H, W))
    return y * weight.reshape(1, C, 1, 1) + bias.reshape(1, C, 1, 1)


def batch_norm(x: Tensor, weight: Tensor, bias: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch norm over [N,C,H,W]; running stats updated in train mode."""
    N, C, H, W = x.shape
    if N * H * W == 0:
        raise InvalidInputError("batch_norm over an empty set")
    if training:
        y = _norm_stats(x, (0, 2, 3), eps)
        m = x.data.mean(axis=(0, 2, 3))
        v = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * m
        running_var *= 1.0 - momentum
        running_var += momentum * v
    else:
        scale = 1.0 / np.sqrt(running_var + eps)
        y = (x - Tensor(running_mean.reshape(1, C, 1, 1).astype(x.data.dtype))) * Tensor(
            scale.reshape(1, C, 1, 1).astype(x.data.dtype))
    return y * weight.reshape(1, C, 1, 1) + bias.reshape(1, C, 1, 1)


def normalize(x: Tensor, kind: str, **kwargs) -> Tensor:
    """Dispatch helper over the three normalization kinds."""
    if kind == "layer":
        return layer_norm(x, **kwargs)
    if kind == "group":
        return group_norm(x, **kwargs)
    if kind == "batch":
        return batch_norm(x, **kwargs)
    raise InvalidInputError(f"unknown normalization kind: {kind}")


def activation(x: Tensor, kind: str, axis: int = -1) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "relu":
        return relu(x)
    if kind == "softmax":
        return softmax(x, axis)
    raise InvalidInputError(f"unknown activation kind: {kind}")


# --------------------------------------------------------------------------
# activation checkpointing
# --------------------------------------------------------------------------

def checkpoint_segment(f, x: Tensor, rng: np.random.Generator | None = None,
                       verify: bool = False) -> Tensor:
    """Run ``f(x)`` saving only ``x``; recompute the segment during backward.

    ``f`` must be deterministic given ``x`` and its captured parameters. Any
    randomness inside ``f`` must be drawn from ``rng``, whose bit-generator
    state is recorded and replayed before recomputation. With ``verify=True``
    the forward output is retained and compared bitwise against the
    recomputation; a mismatch raises CheckpointError (non-replayable
    randomness is a contract violation).
    """
    if not _grad_enabled:
        return f(x)
    rng_state = rng.bit_generator.state if rng is not None else None
    with no_grad():
        y = f(x.detach())
    out_data = y.data
    ref = out_data.copy() if verify else None

    def backward(g):
        if rng_state is not None:
            rng.bit_generator.state = rng_state
        x2 = Tensor(x.data, requires_grad=True)
        prev = counter.enabled
        counter.enabled = False  # recompute saves are transient, not forward-peak
        try:
            y2 = f(x2)
        finally:
            counter.enabled = prev
        if y2.shape != out_data.shape:
            raise CheckpointError("recomputed segment shape differs; non-replayable randomness?")
        if ref is not None and not np.array_equal(y2.data, ref):
            raise CheckpointError("recomputed segment differs bitwise; non-replayable randomness")
        _run_backward(y2, g)
        if x.requires_grad or x._prev:
            x._accum_grad(x2.grad)

    return _make(out_data, (x,), backward, "checkpoint", saved=(x.data,))


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

def finite_difference_grad(f, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar-valued f at x (f64)."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * step)
    return g


def gradcheck(f, x: np.ndarray, step: float = 1e-4, rtol: float = 1e-3) -> float:
    """Compare analytic vs finite-difference gradients; returns the rel error."""
    t = Tensor(x.astype(np.float64), requires_grad=True)
    out = f(t)
    out.backward()
    analytic = t.grad
    numeric = finite_difference_grad(lambda a: f(Tensor(a)).data, x.astype(np.float64), step)
    denom = max(np.linalg.norm(analytic.ravel()), np.linalg.norm(numeric.ravel()), 1e-12)
    rel = np.linalg.norm((analytic - numeric).ravel()) / denom
    if rel >= rtol:
        raise AssertionError(f"gradcheck failed: rel err {rel:.3e} >= {rtol:.1e}")
    return rel
