"""Dense float64 tensors with a reverse-mode tape.

Each op returns a new ``Tensor`` whose ``_backward`` closure pushes the
upstream gradient to its parents. ``backward`` walks the graph in reverse
topological order and then frees it (tapes are single-use). Gradients of
leaf tensors accumulate across calls until ``zero_grad`` is called.
"""
from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _parents=(), op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.op = op

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        backward(self)

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op, backward_fn):
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, req, tuple(parents) if req else (), op)
    if req:
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (undoing numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def backward(loss: Tensor):
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.op and loss._backward is None:
        raise RuntimeError("graph already consumed by a previous backward; rerun the forward pass")
    order, seen = [], set()
    stack = [(loss, False)]
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
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None and not node._parents:
                _accum(node, g)
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward = None


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b), "div",
                 lambda g: (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), "exp", lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), "tanh", lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """tanh-approximated GELU."""
    x = as_tensor(x)
    v = x.data
    u = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(u)
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du),)

    return _make(out, (x,), "gelu", bw)


# -- linear algebra / shape ---------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, m = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), "matmul", bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _make(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), "transpose",
                 lambda g: (np.transpose(g, inv),))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)

    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), "slice", bw)


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, "concat", bw)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), "sum", bw)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# -- normalisation / attention pieces ----------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (x,), "softmax",
                 lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale/shift by ``gamma``/``beta``."""
    x = as_tensor(x)
    parents = [x]
    if gamma is not None:
        gamma = as_tensor(gamma)
        beta = as_tensor(beta)
        if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
            raise ShapeError(f"layer_norm: affine shape {gamma.shape} vs features {x.shape[-1:]}")
        parents += [gamma, beta]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat if gamma is None else xhat * gamma.data + beta.data

    def bw(g):
        gx = g if gamma is None else g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        if gamma is None:
            return (dx,)
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, parents, "layer_norm", bw)


def l2_normalize(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(n == 0):
        raise ValueError("l2_normalize: zero-norm row")
    y = x.data / n
    return _make(y, (x,), "l2_normalize",
                 lambda g: ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,))


def embedding(weight, idx) -> Tensor:
    weight = as_tensor(weight)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: index out of range for table {weight.shape}")

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, idx, g)
        return (gw,)

    return _make(weight.data[idx], (weight,), "embedding", bw)


def dropout(x, p: float, rng=None, training: bool = True) -> Tensor:
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout p must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), "dropout", lambda g: (g * keep,))
