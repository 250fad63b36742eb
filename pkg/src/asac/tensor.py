"""Reverse-mode autodiff over float64 numpy arrays.

Every operation records its inputs and a backward closure on the output
tensor; ``backward`` on a scalar walks the graph once in reverse
topological order and accumulates gradients into the leaves.  All math
is float64 and single threaded, so repeated runs are bit-identical.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ContractError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    """A tensor that never requires grad (detached numeric payload)."""
    return Tensor(np.asarray(data, dtype=np.float64))


def _make(data, parents, backward_fn) -> Tensor:
    """Wrap an op result, recording the closure only when grads can flow."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(data, (a, b), back)


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a python scalar."""
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def back(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), back)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    if a.ndim != b.ndim and b.ndim != 2:
        raise ShapeError(f"matmul stacking mismatch: {a.shape} @ {b.shape}")
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading dims disagree: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def back(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, ga)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if b.ndim < gb.ndim:
                gb = gb.sum(axis=tuple(range(gb.ndim - b.ndim)))
            _accumulate(b, gb)

    return _make(data, (a, b), back)


def transpose(x, axes=None) -> Tensor:
    """Permute axes; default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        data = np.swapaxes(x.data, -1, -2)

        def back(g):
            _accumulate(x, np.swapaxes(g, -1, -2))

    else:
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        data = np.transpose(x.data, axes)

        def back(g):
            _accumulate(x, np.transpose(g, inv))

    return _make(data, (x,), back)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def back(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(data, (x,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _make(data, tuple(tensors), back)


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis; gradient zero-pads back."""
    x = as_tensor(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = x.data[idx]

    def back(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[idx] = g
            _accumulate(x, full)

    return _make(data, (x,), back)


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    data = np.sum(x.data, axis=axis)

    def back(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape).copy())
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return _make(data, (x,), back)


def tmean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    data = np.mean(x.data, axis=axis)
    n = x.size if axis is None else x.shape[axis]

    def back(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g / n, x.shape).copy())
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy())

    return _make(data, (x,), back)


# -- nonlinearities -----------------------------------------------------------


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    data = np.where(pos, x.data, slope * x.data)

    def back(g):
        _accumulate(x, g * np.where(pos, 1.0, slope))

    return _make(data, (x,), back)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """Tanh-form gaussian error linear unit."""
    x = as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    data = 0.5 * v * (1.0 + t)

    def back(g):
        sech2 = 1.0 - t * t
        local = 0.5 * (1.0 + t) + 0.5 * v * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        _accumulate(x, g * local)

    return _make(data, (x,), back)


def softmax_lastdim(x) -> Tensor:
    """Numerically stable softmax along the last axis."""
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / np.sum(e, axis=-1, keepdims=True)

    def back(g):
        dot = np.sum(g * data, axis=-1, keepdims=True)
        _accumulate(x, data * (g - dot))

    return _make(data, (x,), back)


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    x = as_tensor(x)
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.mean((x.data - mu) ** 2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = (x.data - mu) * inv

    def back(g):
        gm = np.mean(g, axis=-1, keepdims=True)
        gym = np.mean(g * normed, axis=-1, keepdims=True)
        _accumulate(x, inv * (g - gm - normed * gym))

    return _make(normed, (x,), back)


def log(x) -> Tensor:
    x = as_tensor(x)
    data = np.log(x.data)

    def back(g):
        _accumulate(x, g / x.data)

    return _make(data, (x,), back)


def exp(x) -> Tensor:
    x = as_tensor(x)
    data = np.exp(x.data)

    def back(g):
        _accumulate(x, g * data)

    return _make(data, (x,), back)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    data = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                    np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def back(g):
        _accumulate(x, g * data * (1.0 - data))

    return _make(data, (x,), back)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through the unclamped region."""
    x = as_tensor(x)
    data = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def back(g):
        _accumulate(x, g * inside)

    return _make(data, (x,), back)


def mse(a, b) -> Tensor:
    """Mean of squared differences over all elements; returns a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse operands disagree: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    data = np.mean(diff**2)
    n = diff.size

    def back(g):
        scale = g * 2.0 / n
        _accumulate(a, scale * diff)
        _accumulate(b, -scale * diff)

    return _make(data, (a, b), back)


def embedding_lookup(table, ids) -> Tensor:
    """Select rows of ``table`` by integer index; grads scatter-add back."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    data = table.data[ids]

    def back(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            _accumulate(table, full)

    return _make(data, (table,), back)


def tile_rows(x, reps: int) -> Tensor:
    """Repeat each row ``reps`` times: [B, d] -> [B * reps, d]."""
    x = as_tensor(x)
    data = np.repeat(x.data, reps, axis=0)

    def back(g):
        _accumulate(x, g.reshape(x.shape[0], reps, *x.shape[1:]).sum(axis=1))

    return _make(data, (x,), back)


def dropout(x, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    keep = rng.random(x.shape) >= p
    scale = 1.0 / (1.0 - p)
    data = x.data * keep * scale

    def back(g):
        _accumulate(x, g * keep * scale)

    return _make(data, (x,), back)


def stop_gradient(x) -> Tensor:
    """Detach: same values, no history."""
    x = as_tensor(x)
    return Tensor(x.data)


# -- backward pass ------------------------------------------------------------


def backward(loss: Tensor):
    """Backpropagate from a scalar; leaf grads accumulate, interior ones free."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward on a tensor with no graph attached")

    order = []
    seen = {id(loss)}
    stack = [(loss, iter(loss._parents))]
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if p._backward is not None and id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        node._backward(node.grad)
        node.grad = None  # interior grads are not retained
        node._backward = None
        node._parents = ()
