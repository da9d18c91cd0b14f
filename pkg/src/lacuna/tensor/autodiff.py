"""Reverse-mode autodiff over dense numpy arrays.

Volumetric tensors are laid out ``(channels, nx, ny, nz)`` with no batch
axis; training steps process one patch at a time.  Every op is a function
returning a new :class:`Tensor` whose backward closure maps the upstream
gradient to one gradient per parent.
"""
from __future__ import annotations

import itertools

import numpy as np

from ..errors import OddSpatialDim, ShapeMismatch

_ids = itertools.count()


class Tensor:
    __slots__ = ("values", "_grad", "parents", "_backward", "requires_grad", "id", "name")

    def __init__(self, values, parents=(), backward=None, requires_grad=None, name=None):
        self.values = np.asarray(values)
        self._grad = None
        self.parents = tuple(parents)
        self._backward = backward
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every upstream tensor's ``grad``."""
        if grad is None:
            if self.values.size != 1:
                raise ShapeMismatch("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.values)
        order = _topological(self)
        self._grad = np.asarray(grad, dtype=self.values.dtype).reshape(self.shape).copy()
        for node in reversed(order):
            if node._backward is None or node._grad is None:
                continue
            grads = node._backward(node._grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent._grad is None:
                    parent._grad = np.array(g, dtype=parent.values.dtype).reshape(parent.shape)
                else:
                    parent._grad += g
            if node.parents:
                # interior buffers are not needed once propagated
                node._grad = None if node is not self else node._grad


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen or not node.requires_grad:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.id not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def parameter(values, name=None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


# Convolution ----------------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    """(C, X, Y, Z) -> (C, 27, X, Y, Z) of zero-padded 3x3x3 neighbourhoods."""
    c, nx, ny, nz = x.shape
    xp = np.zeros((c, nx + 2, ny + 2, nz + 2), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, 1:-1] = x
    cols = np.empty((c, 27, nx, ny, nz), dtype=x.dtype)
    n = 0
    for i in range(3):
        for j in range(3):
            for k in range(3):
                cols[:, n] = xp[:, i:i + nx, j:j + ny, k:k + nz]
                n += 1
    return cols


def _col2im(dcols: np.ndarray) -> np.ndarray:
    c, _, nx, ny, nz = dcols.shape
    dxp = np.zeros((c, nx + 2, ny + 2, nz + 2), dtype=dcols.dtype)
    n = 0
    for i in range(3):
        for j in range(3):
            for k in range(3):
                dxp[:, i:i + nx, j:j + ny, k:k + nz] += dcols[:, n]
                n += 1
    return dxp[:, 1:-1, 1:-1, 1:-1]


def conv3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3x3 cross-correlation, stride 1, zero padding 1."""
    if x.values.ndim != 4 or w.values.ndim != 5 or w.shape[2:] != (3, 3, 3):
        raise ShapeMismatch(f"conv3 expects (C,X,Y,Z) input and (O,C,3,3,3) weights, got {x.shape}, {w.shape}")
    out_c, in_c = w.shape[:2]
    if x.shape[0] != in_c or b.shape != (out_c,):
        raise ShapeMismatch(f"conv3 channel mismatch: input {x.shape}, weights {w.shape}, bias {b.shape}")
    spatial = x.shape[1:]
    cols = _im2col(x.values)
    flat = cols.reshape(in_c * 27, -1)
    wmat = w.values.reshape(out_c, in_c * 27)
    out = (wmat @ flat).reshape(out_c, *spatial) + b.values.reshape(out_c, 1, 1, 1)
    need_dx = x.requires_grad

    def backward(g):
        g2 = g.reshape(out_c, -1)
        dw = (g2 @ flat.T).reshape(w.shape)
        db = g2.sum(axis=1)
        dx = None
        if need_dx:
            dx = _col2im((wmat.T @ g2).reshape(in_c, 27, *spatial))
        return dx, dw, db

    return Tensor(out, (x, w, b), backward)


def conv1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Pointwise (1x1x1) convolution; ``w`` has shape (O, C)."""
    out_c, in_c = w.shape
    if x.shape[0] != in_c or b.shape != (out_c,):
        raise ShapeMismatch(f"conv1 channel mismatch: input {x.shape}, weights {w.shape}")
    spatial = x.shape[1:]
    flat = x.values.reshape(in_c, -1)
    out = (w.values @ flat).reshape(out_c, *spatial) + b.values.reshape(out_c, *([1] * len(spatial)))

    def backward(g):
        g2 = g.reshape(out_c, -1)
        return (w.values.T @ g2).reshape(x.shape), g2 @ flat.T, g2.sum(axis=1)

    return Tensor(out, (x, w, b), backward)


# Activations ------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return Tensor(np.where(mask, x.values, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0, -v)).astype(v.dtype)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.values)
    return Tensor(s, (x,), lambda g: (g * s * (1 - s),))


def softmax_values(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax3(x: Tensor) -> Tensor:
    if x.shape[-1] != 3:
        raise ShapeMismatch(f"softmax3 expects 3 logits, got shape {x.shape}")
    p = softmax_values(x.values)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return Tensor(p, (x,), backward)


# Resolution changes -------------------------------------------------------

def _check_even(x: Tensor, op: str):
    if any(n % 2 for n in x.shape[1:]):
        raise OddSpatialDim(f"{op} needs even spatial dims, got {x.shape[1:]}")


def maxpool2(x: Tensor) -> Tensor:
    """2x2x2 max pooling; ties route to the first voxel of the block."""
    if x.values.ndim != 4:
        raise ShapeMismatch(f"maxpool2 expects (C,X,Y,Z), got {x.shape}")
    _check_even(x, "maxpool2")
    c, nx, ny, nz = x.shape
    blocks = (x.values.reshape(c, nx // 2, 2, ny // 2, 2, nz // 2, 2)
              .transpose(0, 1, 3, 5, 2, 4, 6).reshape(c, nx // 2, ny // 2, nz // 2, 8))
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        d = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(d, arg[..., None], g[..., None], axis=-1)
        d = d.reshape(c, nx // 2, ny // 2, nz // 2, 2, 2, 2).transpose(0, 1, 4, 2, 5, 3, 6)
        return (d.reshape(x.shape),)

    return Tensor(out, (x,), backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling along every spatial axis."""
    if x.values.ndim != 4:
        raise ShapeMismatch(f"upsample2 expects (C,X,Y,Z), got {x.shape}")
    c, nx, ny, nz = x.shape
    v = x.values
    out = np.broadcast_to(v[:, :, None, :, None, :, None], (c, nx, 2, ny, 2, nz, 2)).reshape(c, 2 * nx, 2 * ny, 2 * nz)

    def backward(g):
        return (g.reshape(c, nx, 2, ny, 2, nz, 2).sum(axis=(2, 4, 6)),)

    return Tensor(np.ascontiguousarray(out), (x,), backward)


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Channel concatenation."""
    if a.shape[1:] != b.shape[1:]:
        raise ShapeMismatch(f"concat needs equal spatial dims, got {a.shape} and {b.shape}")
    ca = a.shape[0]
    out = np.concatenate([a.values, b.values], axis=0)
    return Tensor(out, (a, b), lambda g: (g[:ca], g[ca:]))


# Reductions / dense layers ----------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    """(C, X, Y, Z) -> (C,) spatial mean."""
    n = int(np.prod(x.shape[1:]))
    out = x.values.reshape(x.shape[0], -1).mean(axis=1)

    def backward(g):
        return (np.broadcast_to((g / n).reshape(-1, 1, 1, 1), x.shape).astype(x.dtype),)

    return Tensor(out, (x,), backward)


def linear(v: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map of a vector: ``w @ v + b`` with ``w`` of shape (out, in)."""
    if v.values.ndim != 1 or w.shape[1] != v.shape[0] or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"linear shapes disagree: v {v.shape}, w {w.shape}, b {b.shape}")
    out = w.values @ v.values + b.values
    return Tensor(out, (v, w, b), lambda g: (w.values.T @ g, np.outer(g, v.values), g))


def log_load(x: Tensor, delta: float) -> Tensor:
    """``log1p(mean(x) / delta)`` as a length-1 vector."""
    n = x.values.size
    m = float(x.values.mean())
    out = np.array([np.log1p(m / delta)], dtype=x.dtype)

    def backward(g):
        return (np.full(x.shape, g[0] / (n * (delta + m)), dtype=x.dtype),)

    return Tensor(out, (x,), backward)


def add_offset(x: Tensor, offset: np.ndarray) -> Tensor:
    """``x + offset`` with a constant, broadcastable offset."""
    out = (x.values + np.asarray(offset, dtype=x.dtype)).astype(x.dtype)
    return Tensor(out, (x,), lambda g: (g,))


def logit_values(p: np.ndarray, eps: float) -> np.ndarray:
    p = np.clip(p, eps, 1 - eps)
    return np.log(p) - np.log1p(-p)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(weights * x)``; used to seed composite gradient checks."""
    weights = np.asarray(weights, dtype=x.dtype)
    return Tensor(np.sum(x.values * weights), (x,), lambda g: (g * weights,))
