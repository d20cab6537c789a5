"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray and records enough of the expression graph to run
backpropagation: each op closes over its inputs and knows how to push a
gradient back through itself. backward() seeds the output gradient and walks
the graph once in reverse topological order.

Kept deliberately small: broadcasting binary ops, matmul, shape ops, the few
pointwise functions the model needs, and a numerically safe softmax. Anything
fancier belongs in the calling code.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class GradientError(RuntimeError):
    """Raised when a gradient is requested that the graph cannot provide."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to shape, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # construction helper for op results
    @classmethod
    def _result(cls, data, parents, backward) -> "Tensor":
        out = cls(data, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accum(self, grad: np.ndarray) -> None:
        grad = grad.astype(self.data.dtype, copy=False)
        self.grad = grad if self.grad is None else self.grad + grad

    def backward(self, grad=None) -> None:
        if not self.requires_grad:
            raise GradientError("backward() on a tensor with no recorded graph")
        if grad is None:
            if self.data.size != 1:
                raise GradientError(
                    f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise GradientError(
                f"seed gradient shape {grad.shape} does not match {self.shape}")

        # iterative topological order; graphs can outgrow the recursion limit
        order, seen, stack = [], set(), [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self._accum(grad)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # ---- binary ops ----

    def __add__(self, other):
        other = as_tensor(other)

        def back(g):
            self._accum(_unbroadcast(g, self.shape))
            other._accum(_unbroadcast(g, other.shape))
        return Tensor._result(self.data + other.data, (self, other), back)

    __radd__ = __add__

    def __neg__(self):
        def back(g):
            self._accum(-g)
        return Tensor._result(-self.data, (self,), back)

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)

        def back(g):
            self._accum(_unbroadcast(g * other.data, self.shape))
            other._accum(_unbroadcast(g * self.data, other.shape))
        return Tensor._result(self.data * other.data, (self, other), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)

        def back(g):
            self._accum(_unbroadcast(g / other.data, self.shape))
            other._accum(_unbroadcast(-g * self.data / (other.data ** 2), other.shape))
        return Tensor._result(self.data / other.data, (self, other), back)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")

        def back(g):
            self._accum(g * exponent * self.data ** (exponent - 1))
        return Tensor._result(self.data ** exponent, (self,), back)

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.ndim < 2 or other.ndim < 2:
            raise GradientError("matmul needs operands with at least 2 dims")

        def back(g):
            self._accum(_unbroadcast(g @ other.data.swapaxes(-1, -2), self.shape))
            other._accum(_unbroadcast(self.data.swapaxes(-1, -2) @ g, other.shape))
        return Tensor._result(self.data @ other.data, (self, other), back)

    # ---- shape ops ----

    def swapaxes(self, a: int, b: int):
        def back(g):
            self._accum(g.swapaxes(a, b))
        return Tensor._result(self.data.swapaxes(a, b), (self,), back)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])

        def back(g):
            self._accum(g.reshape(self.shape))
        return Tensor._result(self.data.reshape(shape), (self,), back)

    def __getitem__(self, idx):
        def back(g):
            buf = np.zeros_like(self.data)
            np.add.at(buf, idx, g)
            self._accum(buf)
        return Tensor._result(self.data[idx], (self,), back)

    # ---- reductions ----

    def sum(self, axis=None, keepdims: bool = False):
        def back(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.shape).copy())
                return
            gg = g if keepdims else np.expand_dims(g, axis)
            self._accum(np.broadcast_to(gg, self.shape).copy())
        return Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    # ---- pointwise ----

    def exp(self):
        out_data = np.exp(self.data)

        def back(g):
            self._accum(g * out_data)
        return Tensor._result(out_data, (self,), back)

    def log(self):
        def back(g):
            self._accum(g / self.data)
        return Tensor._result(np.log(self.data), (self,), back)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def back(g):
            self._accum(g * 0.5 / out_data)
        return Tensor._result(out_data, (self,), back)

    def astype(self, dtype):
        def back(g):
            self._accum(g)  # _accum casts back to the source dtype
        return Tensor._result(self.data.astype(dtype), (self,), back)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accum(piece)
    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis),
                          tensors, back)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit, 0.5 x (1 + erf(x / sqrt(2)))."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data ** 2)
        x._accum(g * (cdf + x.data * pdf))
    return Tensor._result(x.data * cdf, (x,), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Shift-stabilized softmax; the subtracted max is a constant, which is
    exact because softmax is invariant to a per-row shift."""
    x = as_tensor(x)
    shifted = x - Tensor(np.max(x.data, axis=axis, keepdims=True))
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)
