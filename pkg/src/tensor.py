"""Dense tensor with reverse-mode differentiation, backed by numpy.

A :class:`Tensor` wraps a contiguous ``float32`` or ``float64`` array. Every
operation on tensors that require gradients records its inputs and a closure
computing the input gradients; :func:`backward` walks that graph once, from
a scalar loss, and accumulates ``grad`` on the leaves.

Graph recording is controlled per thread (see :func:`no_grad`), so separate
graphs may be built concurrently while one graph is always built and walked
by a single thread.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .errors import ArgumentError, DimensionError

DTYPES = {"fp32": np.float32, "fp64": np.float64}

_grad_state = threading.local()


def is_grad_enabled():
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def resolve_dtype(dtype):
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ArgumentError(f"Unknown dtype {dtype!r}; expected one of {sorted(DTYPES)}")
        return DTYPES[dtype]
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ArgumentError(f"Unsupported dtype {np.dtype(dtype).name}; only fp32 and fp64 exist")
    return dtype


class Tensor:
    """N-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = data.data if isinstance(data, Tensor) else np.asarray(data)
        if dtype is not None:
            arr = arr.astype(resolve_dtype(dtype), copy=False)
        elif arr.dtype.type not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- info -------------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return tabs(self)

    def backward(self, params=None):
        backward(self, params)


# ---------------------------------------------------------------------------
# graph plumbing
# ---------------------------------------------------------------------------


def as_tensor(value, like=None):
    """Wrap scalars/arrays as constant tensors in the dtype of ``like``."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def make_result(data, parents, backward_fn):
    """Create an op output, recording the graph edge when any parent needs it."""
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss, params=None):
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``.

    Gradients accumulate additively into existing ``grad`` buffers. Tensors in
    ``params`` that the loss does not reach receive a zero gradient.
    """
    if loss.data.size != 1:
        raise ArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        pending = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topological_order(loss)):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node._backward is None:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad
    for param in params or ():
        tensor = getattr(param, "tensor", param)
        if tensor.grad is None:
            tensor.grad = np.zeros_like(tensor.data)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _pair(a, b)

    def _backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), _backward)


def sub(a, b):
    a, b = _pair(a, b)

    def _backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), _backward)


def mul(a, b):
    a, b = _pair(a, b)

    def _backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), _backward)


def div(a, b):
    a, b = _pair(a, b)

    def _backward(g):
        ga = unbroadcast(g / b.data, a.shape)
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return make_result(a.data / b.data, (a, b), _backward)


def power(a, exponent):
    exponent = float(exponent)

    def _backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return make_result(a.data ** exponent, (a,), _backward)


def exp(a):
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a):
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,))


def tabs(a):
    return make_result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a, low, high):
    """Clamp values; the gradient is passed only where the input is in range."""
    inside = (a.data >= low) & (a.data <= high)
    return make_result(np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


def relu(a):
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a):
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


# ---------------------------------------------------------------------------
# reductions and linear algebra
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), _backward)


def mean(a, axis=None, keepdims=False):
    axes = range(a.ndim) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise ArgumentError(f"mean over an empty axis of a tensor shaped {a.shape}")
    return tsum(a, axis, keepdims) * (1.0 / count)


def matmul(a, b):
    """Batched matrix product over the last two axes (numpy broadcasting)."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least 2 axes", axis=-1)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner axes differ: {a.shape[-1]} vs {b.shape[-2]}", axis=-1
        )

    def _backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_result(a.data @ b.data, (a, b), _backward)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a, shape):
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def broadcast_to(a, shape):
    return make_result(
        np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (unbroadcast(g, a.shape),)
    )


def _has_array_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def getitem(a, index):
    advanced = _has_array_index(index)

    def _backward(g):
        out = np.zeros_like(a.data)
        if advanced:
            np.add.at(out, index, g)
        else:
            out[index] += g
        return (out,)

    return make_result(a.data[index], (a,), _backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim:
            raise DimensionError("concat operands differ in rank", axis=axis)
        for ax in range(t.ndim):
            if ax != axis and t.shape[ax] != tensors[0].shape[ax]:
                raise DimensionError(
                    f"concat operands differ on axis {ax}: {t.shape[ax]} vs {tensors[0].shape[ax]}",
                    axis=ax,
                )
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _backward(g):
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return tuple(grads)

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, _backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def pad(a, pad_width, mode="constant"):
    """Pad with zeros (``constant``) or by replicating the border (``edge``)."""
    pad_width = tuple(tuple(int(v) for v in pw) for pw in pad_width)
    if mode not in ("constant", "edge"):
        raise ArgumentError(f"Unsupported pad mode {mode!r}")

    def _backward(g):
        for axis, (before, after) in enumerate(pad_width):
            if before == 0 and after == 0:
                continue
            extent = g.shape[axis] - before - after
            core = np.take(g, np.arange(before, before + extent), axis=axis)
            if mode == "edge":
                core = core.copy()
                first = [slice(None)] * g.ndim
                first[axis] = slice(0, 1)
                last = [slice(None)] * g.ndim
                last[axis] = slice(extent - 1, extent)
                if before:
                    core[tuple(first)] += np.take(g, np.arange(before), axis=axis).sum(
                        axis=axis, keepdims=True
                    )
                if after:
                    core[tuple(last)] += np.take(
                        g, np.arange(before + extent, g.shape[axis]), axis=axis
                    ).sum(axis=axis, keepdims=True)
            g = core
        return (g,)

    return make_result(np.pad(a.data, pad_width, mode=mode), (a,), _backward)
