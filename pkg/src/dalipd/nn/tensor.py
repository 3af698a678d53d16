"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray and, when produced by an op with differentiable
inputs, remembers its parents and per-parent gradient closures. Calling
``backward()`` on a scalar walks the graph in reverse topological order and
accumulates gradients into leaf tensors (``requires_grad`` and no parents).

Ops are pure: tensors are never mutated by ops, only by explicit optimizer
updates on leaf data. Broadcasting follows numpy rules; gradients are summed
back down to each operand's shape.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import config
from .config import NonFiniteError  # re-exported for callers

__all__ = ["Tensor", "tensor", "zeros", "ones", "NonFiniteError", "concat"]

GradFn = Callable[[np.ndarray], np.ndarray]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        if isinstance(data, np.ndarray):
            if data.dtype not in (np.float32, np.float64):
                data = data.astype(config.default_dtype())
        else:
            data = np.asarray(data, dtype=config.default_dtype())
        config.ensure_finite(data, "tensor construction")
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[tuple[Tensor, GradFn], ...] = ()

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- autograd -----------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar output into leaf ``grad`` buffers."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                for parent, fn in node._parents:
                    contrib = fn(g)
                    prev = grads.get(id(parent))
                    grads[id(parent)] = contrib if prev is None else prev + contrib
            elif node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g

    # -- operators ----------------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method aliases -----------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return abs_(self)

    def sigmoid(self):
        return sigmoid(self)

    def silu(self):
        return silu(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=config.default_dtype()), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=config.default_dtype()), requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def make_op(data: np.ndarray, parents: Sequence[tuple[Tensor, GradFn]], name: str) -> Tensor:
    """Wrap an op result, attaching gradient closures for tracked parents."""
    config.ensure_finite(data, name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if config.grad_enabled():
        tracked = tuple((p, fn) for p, fn in parents if p.requires_grad or p._parents)
        out.requires_grad = bool(tracked)
        out._parents = tracked
    else:
        out.requires_grad = False
        out._parents = ()
    return out


# -- elementwise arithmetic --------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return make_op(
        a.data + b.data,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return make_op(
        a.data - b.data,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(-g, b.shape))],
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return make_op(
        a.data * b.data,
        [
            (a, lambda g: _unbroadcast(g * b.data, a.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.shape)),
        ],
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return make_op(
        out,
        [
            (a, lambda g: _unbroadcast(g / b.data, a.shape)),
            (b, lambda g: _unbroadcast(-g * out / b.data, b.shape)),
        ],
        "div",
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return make_op(-a.data, [(a, lambda g: -g)], "neg")


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    e = float(exponent)
    return make_op(
        a.data**e,
        [(a, lambda g: g * e * a.data ** (e - 1.0))],
        "power",
    )


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, [(a, lambda g: g * out)], "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    return make_op(np.log(a.data), [(a, lambda g: g / a.data)], "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return make_op(out, [(a, lambda g: g * 0.5 / out)], "sqrt")


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    return make_op(np.abs(a.data), [(a, lambda g: g * np.sign(a.data))], "abs")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # both branches are overflow-safe for large |x|
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype, copy=False)
    return make_op(out, [(a, lambda g: g * out * (1.0 - out))], "sigmoid")


def silu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    s = s.astype(x.dtype, copy=False)
    out = x * s
    return make_op(out, [(a, lambda g: g * (s + out * (1.0 - s)))], "silu")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is 1 strictly inside [lo, hi], 0 outside."""
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    return make_op(out, [(a, lambda g: g * inside)], "clip")


# -- reductions ---------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g: np.ndarray) -> np.ndarray:
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g_exp, a.shape).copy()

    return make_op(np.asarray(out), [(a, grad_fn)], "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    # keep the factor in the input dtype; a default-dtype cast would poison
    # float64 graphs with a float32-rounded reciprocal
    factor = np.asarray(1.0 / count, dtype=a.data.dtype)
    return sum_(a, axis=axis, keepdims=keepdims) * factor


def max_detached(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max as a constant (no gradient); used for softmax stabilization."""
    a = _as_tensor(a)
    return Tensor(a.data.max(axis=axis, keepdims=keepdims))


# -- shape ops ----------------------------------------------------------------


def reshape(a, *shape) -> Tensor:
    a = _as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.shape
    return make_op(a.data.reshape(shape), [(a, lambda g: g.reshape(old))], "reshape")


def transpose(a, *axes) -> Tensor:
    a = _as_tensor(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_op(a.data.transpose(axes), [(a, lambda g: g.transpose(inverse))], "transpose")


def getitem(a, index) -> Tensor:
    a = _as_tensor(a)
    out = a.data[index]

    def grad_fn(g: np.ndarray) -> np.ndarray:
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return full

    return make_op(np.ascontiguousarray(out), [(a, grad_fn)], "getitem")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def make_grad(i: int) -> GradFn:
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: np.ascontiguousarray(g[sl])

    return make_op(out, [(t, make_grad(i)) for i, t in enumerate(ts)], "concat")


def pad2d(a, pad: int) -> Tensor:
    """Zero-pad the last two axes by ``pad`` on every side."""
    a = _as_tensor(a)
    if pad == 0:
        return a
    width = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    sl = (Ellipsis, slice(pad, a.shape[-2] + pad), slice(pad, a.shape[-1] + pad))
    return make_op(np.pad(a.data, width), [(a, lambda g: np.ascontiguousarray(g[sl]))], "pad2d")


# -- matmul -------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with stacked (batched) broadcasting; operands must be >= 2-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires operands with ndim >= 2")
    out = np.matmul(a.data, b.data)

    def grad_a(g: np.ndarray) -> np.ndarray:
        return _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)

    def grad_b(g: np.ndarray) -> np.ndarray:
        return _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)

    return make_op(out, [(a, grad_a), (b, grad_b)], "matmul")
