"""Reverse-mode automatic differentiation over numpy arrays.

The tape is define-by-run: every operation whose inputs require gradients
records its parents and a backward closure on the output tensor. Calling
``Tensor.backward`` on a scalar loss walks the recorded graph once in
reverse topological order and accumulates gradients into the leaves.
Graphs live for a single training step and are reclaimed with their
tensors; gradients are cleared explicitly via ``zero_grads``.

All ops verify that their output is finite and raise ``NonFiniteError``
naming the op otherwise. Shapes are validated up front and reported on
both sides of a mismatch.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes do not conform for an op."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN/Inf, or a gradient went non-finite."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block; forwards run without graph records."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """A numpy array plus optional participation in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{grad})"

    # -- operator sugar; scalars and arrays are lifted to constant tensors --

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
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; divide by a scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tensor_slice(self, key)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def square(self):
        return square(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def backward(self):
        """Reverse-accumulate from this scalar; returns a leaf -> grad map.

        Every ``requires_grad`` leaf reachable from the loss receives exactly
        one accumulated gradient. The graph itself is untouched and may be
        traversed again, but the usual policy is one backward per step with
        ``zero_grads`` in between.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
        return {t: t.grad for t in topo if t.requires_grad and t._backward is None}


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# op machinery


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if isinstance(like, Tensor) else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _finite_or_raise(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"op '{op}' produced a non-finite value")


def _make(data, op, parents, backward):
    _finite_or_raise(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _sum_to(grad, shape):
    """Reduce a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcastable(a, b, op):
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeMismatch(
            f"op '{op}': shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


# ---------------------------------------------------------------------------
# forward ops


def add(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _broadcastable(a, b, "add")
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _sum_to(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _sum_to(g, b.data.shape))

    return _make(data, "add", (a, b), backward)


def sub(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _broadcastable(a, b, "sub")
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _sum_to(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _sum_to(-g, b.data.shape))

    return _make(data, "sub", (a, b), backward)


def mul(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _broadcastable(a, b, "mul")
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _sum_to(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _sum_to(g * a.data, b.data.shape))

    return _make(data, "mul", (a, b), backward)


def matmul(a, b):
    """Matrix product; the right operand must be 2-D (batch dims on the left)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim != 2:
        raise ShapeMismatch(
            f"op 'matmul': expected left ndim >= 2 and right ndim == 2, "
            f"got shapes {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeMismatch(
            f"op 'matmul': shapes {a.data.shape} and {b.data.shape} do not conform"
        )
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            axes = tuple(range(g.ndim - 1))
            _accum(b, np.tensordot(a.data, g, axes=(axes, axes)))

    return _make(data, "matmul", (a, b), backward)


def conv1d(x, w, b=None, dilation=1):
    """1-D convolution along the frame axis, stride 1, zero 'same' padding.

    x: [batch, frames, in_ch]; w: [out_ch, in_ch, k] with odd k; b: [out_ch].
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeMismatch(
            f"op 'conv1d': expected x [B,F,Cin] and w [Cout,Cin,K], "
            f"got shapes {x.data.shape} and {w.data.shape}"
        )
    out_ch, in_ch, k = w.data.shape
    if k % 2 != 1:
        raise ShapeMismatch(f"op 'conv1d': kernel width must be odd, got {k}")
    if x.data.shape[2] != in_ch:
        raise ShapeMismatch(
            f"op 'conv1d': shapes {x.data.shape} and {w.data.shape} do not conform"
        )
    if b is not None:
        b = _as_tensor(b)
        if b.data.shape != (out_ch,):
            raise ShapeMismatch(
                f"op 'conv1d': bias shape {b.data.shape} does not match out_ch {out_ch}"
            )
    frames = x.data.shape[1]
    pad = dilation * (k // 2)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    data = np.zeros((x.data.shape[0], frames, out_ch), dtype=x.data.dtype)
    for i in range(k):
        data += xp[:, i * dilation : i * dilation + frames, :] @ w.data[:, :, i].T
    if b is not None:
        data += b.data

    def backward(g):
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(k):
                gw[:, :, i] = np.tensordot(
                    g, xp[:, i * dilation : i * dilation + frames, :], axes=((0, 1), (0, 1))
                )
            _accum(w, gw)
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 1)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                gxp[:, i * dilation : i * dilation + frames, :] += g @ w.data[:, :, i]
            _accum(x, gxp[:, pad : pad + frames, :])

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, "conv1d", parents, backward)


def tanh(x):
    x = _as_tensor(x)
    data = np.tanh(x.data)

    def backward(g):
        if x.requires_grad:
            _accum(x, g * (1.0 - data * data))

    return _make(data, "tanh", (x,), backward)


def _sigmoid_stable(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    x = _as_tensor(x)
    data = _sigmoid_stable(x.data)

    def backward(g):
        if x.requires_grad:
            _accum(x, g * data * (1.0 - data))

    return _make(data, "sigmoid", (x,), backward)


def relu(x):
    x = _as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def backward(g):
        if x.requires_grad:
            _accum(x, g * (x.data > 0))

    return _make(data, "relu", (x,), backward)


def square(x):
    x = _as_tensor(x)
    data = x.data * x.data

    def backward(g):
        if x.requires_grad:
            _accum(x, g * 2.0 * x.data)

    return _make(data, "square", (x,), backward)


def tsum(x):
    x = _as_tensor(x)
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g):
        if x.requires_grad:
            _accum(x, np.full_like(x.data, g))

    return _make(data, "sum", (x,), backward)


def tmean(x):
    x = _as_tensor(x)
    data = np.asarray(x.data.mean(), dtype=x.data.dtype)
    scale = 1.0 / x.data.size

    def backward(g):
        if x.requires_grad:
            _accum(x, np.full_like(x.data, g * scale))

    return _make(data, "mean", (x,), backward)


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatch("op 'concat': needs at least one input")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.data.shape for t in tensors]
        raise ShapeMismatch(f"op 'concat': shapes {shapes} do not align on axis {axis}") from None
    ax = axis % data.ndim
    sizes = [t.data.shape[ax] for t in tensors]

    def backward(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(offset, offset + n)
                _accum(t, g[tuple(idx)])
            offset += n

    return _make(data, "concat", tuple(tensors), backward)


def tensor_slice(x, key):
    """Basic indexing (ints, slices, tuples thereof); gradient scatters back."""
    x = _as_tensor(x)
    data = np.array(x.data[key], copy=True)

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[key] += g
            _accum(x, gx)

    return _make(data, "slice", (x,), backward)


def reshape(x, shape):
    x = _as_tensor(x)
    data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            _accum(x, g.reshape(x.data.shape))

    return _make(data, "reshape", (x,), backward)


def broadcast_to(x, shape):
    x = _as_tensor(x)
    try:
        data = np.array(np.broadcast_to(x.data, shape))
    except ValueError:
        raise ShapeMismatch(
            f"op 'broadcast': shape {x.data.shape} does not broadcast to {shape}"
        ) from None

    def backward(g):
        if x.requires_grad:
            _accum(x, _sum_to(g, x.data.shape))

    return _make(data, "broadcast", (x,), backward)
