"""Reverse-mode automatic differentiation on numpy arrays.

A tape of `Tensor` nodes is built by calling the op functions below; calling
`backward` on a scalar output fills the `.grad` field of every reachable leaf.
Sized for small convnets: conv2d runs as im2col + matmul, everything stays on
the CPU. Reductions use numpy's fixed left-to-right order, so a forward/backward
pass is bit-reproducible for identical inputs.

Arrays keep their dtype end to end: build the leaves in float64 to run the
tight-tolerance gradient checks, float32 for training.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    """One tape node: a value, an optional gradient, and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    # Small operator sugar; the module-level functions are the real API.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return sub(self, other)


def tensor(data, requires_grad=False, dtype=None):
    """Create a leaf node. dtype defaults to float32 for non-float inputs."""
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return Tensor(arr.copy(), requires_grad=requires_grad)


def _needs_grad(*ts):
    return any(t.requires_grad for t in ts)


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(out: Tensor) -> None:
    """Backpropagate from a scalar output through the tape."""
    if out.data.size != 1:
        raise ValueError(f"backward requires a scalar output, got shape {out.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    out.grad = np.ones_like(out.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, _needs_grad(a, b), (a, b))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    out._backward = bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, _needs_grad(a, b), (a, b))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.data.shape))

    out._backward = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, _needs_grad(a, b), (a, b))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = bwd
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c, a.requires_grad, (a,))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * c)

    out._backward = bwd
    return out


def const_minus(c: float, a: Tensor) -> Tensor:
    out = Tensor(c - a.data, a.requires_grad, (a,))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(-g)

    out._backward = bwd
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0), x.requires_grad, (x,))

    def bwd(g):
        if x.requires_grad:
            x.accumulate(g * mask)

    out._backward = bwd
    return out


def cos(x: Tensor) -> Tensor:
    out = Tensor(np.cos(x.data), x.requires_grad, (x,))

    def bwd(g):
        if x.requires_grad:
            x.accumulate(-g * np.sin(x.data))

    out._backward = bwd
    return out


def square(x: Tensor) -> Tensor:
    out = Tensor(x.data * x.data, x.requires_grad, (x,))

    def bwd(g):
        if x.requires_grad:
            x.accumulate(2.0 * g * x.data)

    out._backward = bwd
    return out


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.data.shape
    out = Tensor(x.data.reshape(shape), x.requires_grad, (x,))

    def bwd(g):
        if x.requires_grad:
            x.accumulate(g.reshape(orig))

    out._backward = bwd
    return out


def ssum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims), x.requires_grad, (x,))

    def bwd(g):
        if not x.requires_grad:
            return
        if axis is None:
            x.accumulate(np.broadcast_to(g, x.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            x.accumulate(np.broadcast_to(gg, x.data.shape).copy())

    out._backward = bwd
    return out


def mean(x: Tensor) -> Tensor:
    return scale(ssum(x), 1.0 / x.data.size)


def get_column(x: Tensor, idx: int) -> Tensor:
    """Select column `idx` of a 2-D tensor (or element of a 1-D tensor)."""
    out = Tensor(x.data[..., idx].copy(), x.requires_grad, (x,))

    def bwd(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[..., idx] = g
            x.accumulate(full)

    out._backward = bwd
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data @ b.data, _needs_grad(a, b), (a, b))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# network ops


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x: (N, D), w: (O, D), b: (O,) -> (N, O)."""
    out = Tensor(x.data @ w.data.T + b.data, _needs_grad(x, w, b), (x, w, b))

    def bwd(g):
        if x.requires_grad:
            x.accumulate(g @ w.data)
        if w.requires_grad:
            w.accumulate(g.T @ x.data)
        if b.requires_grad:
            b.accumulate(g.sum(axis=0))

    out._backward = bwd
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride=1, padding=0) -> Tensor:
    """x: (N, C, H, W), w: (O, C, Ky, Kx), b: (O,) -> (N, O, Ho, Wo)."""
    n, c, h, wid = x.data.shape
    o, cw, ky, kx = w.data.shape
    if cw != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {cw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    view = sliding_window_view(xp, (ky, kx), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = view.shape[2], view.shape[3]
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * ky * kx)
    wm = w.data.reshape(o, c * ky * kx)
    y = (cols @ wm.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2) + b.data[None, :, None, None]
    out = Tensor(y, _needs_grad(x, w, b), (x, w, b))

    def bwd(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        if w.requires_grad:
            w.accumulate((gm.T @ cols).reshape(o, c, ky, kx))
        if b.requires_grad:
            b.accumulate(gm.sum(axis=0))
        if x.requires_grad:
            gcols = (gm @ wm).reshape(n, ho, wo, c, ky, kx).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros_like(xp)
            for u in range(ky):
                for v in range(kx):
                    gxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += gcols[:, :, :, :, u, v]
            x.accumulate(gxp[:, :, padding:padding + h, padding:padding + wid] if padding else gxp)

    out._backward = bwd
    return out


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor, stride=1, padding=0) -> Tensor:
    """x: (N, C, H, W), w: (C, 1, Ky, Kx), one filter per channel."""
    n, c, h, wid = x.data.shape
    cw, one, ky, kx = w.data.shape
    if cw != c or one != 1:
        raise ValueError(f"depthwise weight must be (C,1,Ky,Kx) with C={c}, got {w.data.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    view = sliding_window_view(xp, (ky, kx), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = view.shape[2], view.shape[3]
    y = np.einsum("nchwuv,cuv->nchw", view, w.data[:, 0], optimize=True) + b.data[None, :, None, None]
    out = Tensor(y, _needs_grad(x, w, b), (x, w, b))

    def bwd(g):
        if w.requires_grad:
            w.accumulate(np.einsum("nchwuv,nchw->cuv", view, g, optimize=True)[:, None])
        if b.requires_grad:
            b.accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gview = np.einsum("nchw,cuv->nchwuv", g, w.data[:, 0], optimize=True)
            gxp = np.zeros_like(xp)
            for u in range(ky):
                for v in range(kx):
                    gxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += gview[:, :, :, :, u, v]
            x.accumulate(gxp[:, :, padding:padding + h, padding:padding + wid] if padding else gxp)

    out._backward = bwd
    return out


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping average pooling; spatial dims must divide by k."""
    n, c, h, w = x.data.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d: {h}x{w} not divisible by window {k}")
    ho, wo = h // k, w // k
    y = x.data.reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))
    out = Tensor(y, x.requires_grad, (x,))

    def bwd(g):
        if x.requires_grad:
            gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
            x.accumulate(gx)

    out._backward = bwd
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, class_weights=None) -> Tensor:
    """Mean cross-entropy of (N, K) logits vs integer labels (N,).

    With class_weights (K,), each sample is weighted by its class weight and
    the mean is taken over total weight (inverse-frequency weighting).
    """
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    n = logits.data.shape[0]
    idx = np.arange(n)
    logp = z[idx, labels] - np.log(ez.sum(axis=1))
    if class_weights is None:
        sw = np.ones(n, dtype=logits.data.dtype)
    else:
        sw = np.asarray(class_weights, dtype=logits.data.dtype)[labels]
    denom = sw.sum()
    loss = -(sw * logp).sum() / denom
    out = Tensor(np.asarray(loss, dtype=logits.data.dtype), logits.requires_grad, (logits,))

    def bwd(g):
        if logits.requires_grad:
            grad = p * sw[:, None]
            grad[idx, labels] -= sw
            logits.accumulate(g * grad / denom)

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# verification harness


def check_gradient(f, x: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    f maps a leaf Tensor to a scalar Tensor. Error per coordinate is
    |analytic - numeric| / (|analytic| + |numeric| + 1e-12). Ops with
    straight-through gradients must be evaluated in their surrogate
    (rounding-free) form inside f for the comparison to be meaningful.
    """
    x = np.asarray(x, dtype=np.float64)
    leaf = Tensor(x.copy(), requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x.shape))).data
        fm = f(Tensor(xm.reshape(x.shape))).data
        numeric = (float(fp) - float(fm)) / (2 * h)
        a = float(analytic.reshape(-1)[i])
        err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
        worst = max(worst, err)
    return worst
