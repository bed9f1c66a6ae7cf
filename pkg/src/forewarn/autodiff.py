"""Reverse-mode automatic differentiation over numpy arrays.

A minimal tape: each Tensor remembers its parents and a closure that pushes
the output gradient back to them. backward() walks the tape in reverse
topological order (iteratively; recurrent nets build long chains). Everything
is float64. Broadcasting in elementwise ops and batched matmul is supported;
gradients are summed back to the parent's shape.

The op set is exactly what the forecaster families need. Gradients are
verified against central finite differences in the test suite.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

__all__ = ["Tensor", "concat"]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
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
    __slots__ = ("data", "grad", "_parents", "_bw")

    def __init__(self, data, parents: tuple = (), bw=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._bw = bw

    # ------------------------------------------------------------- plumbing

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    @staticmethod
    def _wrap(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into .grad of every reachable node."""
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in order:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._bw is not None:
                node._bw(node.grad)

    # ------------------------------------------------------------- arithmetic

    def __add__(self, other):
        other = self._wrap(other)
        out = Tensor(self.data + other.data, (self, other))

        def bw(g):
            self.grad += _unbroadcast(g, self.data.shape)
            other.grad += _unbroadcast(g, other.data.shape)

        out._bw = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, (self,))
        out._bw = lambda g: self.__iadd_grad(-g)
        return out

    def __iadd_grad(self, g):
        self.grad += _unbroadcast(g, self.data.shape)

    def __sub__(self, other):
        other = self._wrap(other)
        out = Tensor(self.data - other.data, (self, other))

        def bw(g):
            self.grad += _unbroadcast(g, self.data.shape)
            other.grad += _unbroadcast(-g, other.data.shape)

        out._bw = bw
        return out

    def __rsub__(self, other):
        return self._wrap(other).__sub__(self)

    def __mul__(self, other):
        other = self._wrap(other)
        out = Tensor(self.data * other.data, (self, other))

        def bw(g):
            self.grad += _unbroadcast(g * other.data, self.data.shape)
            other.grad += _unbroadcast(g * self.data, other.data.shape)

        out._bw = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._wrap(other)
        out = Tensor(self.data / other.data, (self, other))

        def bw(g):
            self.grad += _unbroadcast(g / other.data, self.data.shape)
            other.grad += _unbroadcast(-g * self.data / other.data**2, other.data.shape)

        out._bw = bw
        return out

    def __rtruediv__(self, other):
        return self._wrap(other).__truediv__(self)

    def __matmul__(self, other):
        other = self._wrap(other)
        out = Tensor(self.data @ other.data, (self, other))

        def bw(g):
            a, b = self.data, other.data
            ga = g @ b.swapaxes(-1, -2) if b.ndim >= 2 else np.outer(g, b)
            gb = a.swapaxes(-1, -2) @ g if a.ndim >= 2 else np.outer(a, g)
            self.grad += _unbroadcast(ga, a.shape)
            other.grad += _unbroadcast(gb, b.shape)

        out._bw = bw
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], (self,))

        def bw(g):
            scatter = np.zeros_like(self.data)
            np.add.at(scatter, idx, g)
            self.grad += scatter

        out._bw = bw
        return out

    # ------------------------------------------------------------- shape ops

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), (self,))
        out._bw = lambda g: self.__iadd_grad(g.reshape(self.data.shape))
        return out

    def transpose(self, axes: Sequence[int]):
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))
        out = Tensor(self.data.transpose(axes), (self,))
        out._bw = lambda g: self.__iadd_grad(g.transpose(inverse))
        return out

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,))

        def bw(g):
            if axis is not None and not keepdims:
                ax = axis if isinstance(axis, tuple) else (axis,)
                g = np.expand_dims(g, ax)
            self.grad += np.broadcast_to(g, self.data.shape)

        out._bw = bw
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # ------------------------------------------------------------- nonlinear

    def tanh(self):
        y = np.tanh(self.data)
        out = Tensor(y, (self,))
        out._bw = lambda g: self.__iadd_grad(g * (1.0 - y * y))
        return out

    def sigmoid(self):
        y = 0.5 * (1.0 + np.tanh(0.5 * self.data))  # numerically stable logistic
        out = Tensor(y, (self,))
        out._bw = lambda g: self.__iadd_grad(g * y * (1.0 - y))
        return out

    def relu(self):
        mask = self.data > 0
        out = Tensor(np.where(mask, self.data, 0.0), (self,))
        out._bw = lambda g: self.__iadd_grad(g * mask)
        return out

    def softplus(self):
        y = np.logaddexp(0.0, self.data)
        s = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        out = Tensor(y, (self,))
        out._bw = lambda g: self.__iadd_grad(g * s)
        return out

    def exp(self):
        y = np.exp(self.data)
        out = Tensor(y, (self,))
        out._bw = lambda g: self.__iadd_grad(g * y)
        return out

    def log(self):
        out = Tensor(np.log(self.data), (self,))
        out._bw = lambda g: self.__iadd_grad(g / self.data)
        return out

    def square(self):
        out = Tensor(self.data * self.data, (self,))
        out._bw = lambda g: self.__iadd_grad(2.0 * g * self.data)
        return out

    def softmax(self, axis: int = -1):
        """Softmax along one axis; the max shift is a constant (no gradient)."""
        shifted = self - self.data.max(axis=axis, keepdims=True)
        e = shifted.exp()
        return e / e.sum(axis=axis, keepdims=True)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(a, b)
            t.grad += g[tuple(idx)]

    out._bw = bw
    return out
