"""Minimal reverse-mode automatic differentiation over numpy float64 arrays.

Each op records its parents and a closure that pushes the output gradient
back to them; backward() walks the graph once in reverse topological
order. Gradients only flow into tensors that are tracked (parameters, or
anything computed from one), so constant inputs cost nothing extra.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

# Names of the registered differentiable primitives; the test suite keys
# its per-primitive finite-difference checks off this tuple.
PRIMITIVE_OPS = (
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "pow",
    "matmul",
    "exp",
    "log",
    "relu",
    "tanh",
    "sigmoid",
    "log_sigmoid",
    "sum",
    "reshape",
    "transpose",
    "getitem",
    "concat",
    "softmax",
    "layer_norm",
)

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "tracked", "_parents", "_backward")

    # Keep numpy from absorbing us in mixed expressions; reflected
    # operators must win so the graph is recorded.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.tracked = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        # Holding a reference is safe: gradients are only ever replaced,
        # never mutated in place.
        if self.grad is None:
            self.grad = g if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        # Iterative DFS; generation graphs can be deep enough to worry
        # about the recursion limit.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.tracked and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # Operator sugar; scalars and arrays are lifted to constant tensors.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow(self, exponent)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, tracked={self.tracked})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[], None]) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.tracked for p in parents):
        out.tracked = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reverse numpy broadcasting: reduce g back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data

    def backward():
        if a.tracked:
            a._accum(_sum_to_shape(out.grad, a.data.shape))
        if b.tracked:
            b._accum(_sum_to_shape(out.grad, b.data.shape))

    out = _make(out_data, (a, b), backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data - b.data

    def backward():
        if a.tracked:
            a._accum(_sum_to_shape(out.grad, a.data.shape))
        if b.tracked:
            b._accum(_sum_to_shape(-out.grad, b.data.shape))

    out = _make(out_data, (a, b), backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data * b.data

    def backward():
        if a.tracked:
            a._accum(_sum_to_shape(out.grad * b.data, a.data.shape))
        if b.tracked:
            b._accum(_sum_to_shape(out.grad * a.data, b.data.shape))

    out = _make(out_data, (a, b), backward)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data / b.data

    def backward():
        if a.tracked:
            a._accum(_sum_to_shape(out.grad / b.data, a.data.shape))
        if b.tracked:
            b._accum(_sum_to_shape(-out.grad * a.data / (b.data * b.data), b.data.shape))

    out = _make(out_data, (a, b), backward)
    return out


def neg(a: Tensor) -> Tensor:
    a = _lift(a)

    def backward():
        if a.tracked:
            a._accum(-out.grad)

    out = _make(-a.data, (a,), backward)
    return out


def pow(a: Tensor, exponent: float) -> Tensor:
    a = _lift(a)
    if isinstance(exponent, Tensor):
        raise TypeError("only constant exponents are supported")
    out_data = a.data ** exponent

    def backward():
        if a.tracked:
            a._accum(out.grad * exponent * a.data ** (exponent - 1))

    out = _make(out_data, (a,), backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """np.matmul semantics with stacked-matrix broadcasting; no 1-D operands."""
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul expects >=2-D operands, got {a.data.shape} @ {b.data.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward():
        if a.tracked:
            g = np.matmul(out.grad, np.swapaxes(b.data, -1, -2))
            a._accum(_sum_to_shape(g, a.data.shape))
        if b.tracked:
            g = np.matmul(np.swapaxes(a.data, -1, -2), out.grad)
            b._accum(_sum_to_shape(g, b.data.shape))

    out = _make(out_data, (a, b), backward)
    return out


def exp(a: Tensor) -> Tensor:
    a = _lift(a)
    out_data = np.exp(a.data)

    def backward():
        if a.tracked:
            a._accum(out.grad * out_data)

    out = _make(out_data, (a,), backward)
    return out


def log(a: Tensor) -> Tensor:
    a = _lift(a)

    def backward():
        if a.tracked:
            a._accum(out.grad / a.data)

    out = _make(np.log(a.data), (a,), backward)
    return out


def relu(a: Tensor) -> Tensor:
    a = _lift(a)
    mask = a.data > 0

    def backward():
        if a.tracked:
            a._accum(out.grad * mask)

    out = _make(np.where(mask, a.data, 0.0), (a,), backward)
    return out


def tanh(a: Tensor) -> Tensor:
    a = _lift(a)
    out_data = np.tanh(a.data)

    def backward():
        if a.tracked:
            a._accum(out.grad * (1.0 - out_data * out_data))

    out = _make(out_data, (a,), backward)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _lift(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward():
        if a.tracked:
            a._accum(out.grad * out_data * (1.0 - out_data))

    out = _make(out_data, (a,), backward)
    return out


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigma(x)) = -softplus(-x), computed without overflow."""
    a = _lift(a)
    x = a.data
    out_data = np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(-np.abs(x))))

    def backward():
        if a.tracked:
            # d/dx log(sigma(x)) = sigma(-x)
            sig_neg = np.where(x >= 0, np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))), 1.0 / (1.0 + np.exp(-np.abs(x))))
            a._accum(out.grad * sig_neg)

    out = _make(out_data, (a,), backward)
    return out


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward():
        if a.tracked:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape).copy())

    out = _make(out_data, (a,), backward)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _lift(a)

    def backward():
        if a.tracked:
            a._accum(out.grad.reshape(a.data.shape))

    out = _make(a.data.reshape(shape), (a,), backward)
    return out


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    a = _lift(a)
    out_data = np.transpose(a.data, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))

    def backward():
        if a.tracked:
            a._accum(np.transpose(out.grad, inverse))

    out = _make(out_data, (a,), backward)
    return out


def _is_advanced_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    """Slice or gather; integer-array indices scatter-add on the way back."""
    a = _lift(a)
    out_data = a.data[index]
    advanced = _is_advanced_index(index)

    def backward():
        if a.tracked:
            g = np.zeros_like(a.data)
            if advanced:
                np.add.at(g, index, out.grad)  # duplicates must accumulate
            else:
                g[index] += out.grad
            a._accum(g)

    out = _make(np.array(out_data, dtype=np.float64), (a,), backward)
    return out


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_lift(t) for t in tensors]
    sizes = [p.data.shape[axis] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward():
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if p.tracked:
                sl: list = [slice(None)] * out_data.ndim
                sl[axis] = slice(start, stop)
                p._accum(out.grad[tuple(sl)])

    out = _make(out_data, parts, backward)
    return out


# Composites (no backward rules of their own).


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        n = a.data.shape[axis]
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _lift(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward():
        if a.tracked:
            g = out.grad
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            a._accum(out_data * (g - inner))

    out = _make(out_data, (a,), backward)
    return out


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    a, gain, bias = _lift(a), _lift(gain), _lift(bias)
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out_data = x_hat * gain.data + bias.data

    def backward():
        g = out.grad
        if gain.tracked:
            gain._accum(_sum_to_shape(g * x_hat, gain.data.shape))
        if bias.tracked:
            bias._accum(_sum_to_shape(g, bias.data.shape))
        if a.tracked:
            gg = g * gain.data
            n = a.data.shape[-1]
            term = gg - gg.mean(axis=-1, keepdims=True) - x_hat * (gg * x_hat).mean(axis=-1, keepdims=True)
            a._accum(term * inv_std)

    out = _make(out_data, (a, gain, bias), backward)
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shift = np.max(a.data, axis=axis, keepdims=True)
    shifted = a - shift
    return shifted - log(sum(exp(shifted), axis=axis, keepdims=True))


def finite_difference(f: Callable[[], float], param: np.ndarray, index: tuple, eps: float) -> float:
    """Central difference of f with respect to one entry of `param`, in place."""
    original = param[index]
    param[index] = original + eps
    f_plus = f()
    param[index] = original - eps
    f_minus = f()
    param[index] = original
    return (f_plus - f_minus) / (2.0 * eps)


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
