"""Small reverse-mode automatic differentiation engine over numpy arrays.

Each Var wraps a float64 ndarray and records a closure that scatters its
output gradient back to its parents.  `backward()` runs the tape in reverse
topological order.  Broadcasting is supported; gradients are summed back to
the parent's shape.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    __slots__ = ("data", "grad", "_backward", "_parents")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape))
        else:
            self.grad += g

    # --- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = as_var(other)
        out = Var(self.data + other.data, (self, other))
        def bw(g):
            self._accumulate(_unbroadcast(g, self.data.shape))
            other._accumulate(_unbroadcast(g, other.data.shape))
        out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Var(-self.data, (self,))
        out._backward = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other):
        return self + (-as_var(other))

    def __rsub__(self, other):
        return as_var(other) + (-self)

    def __mul__(self, other):
        other = as_var(other)
        out = Var(self.data * other.data, (self, other))
        def bw(g):
            self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            other._accumulate(_unbroadcast(g * self.data, other.data.shape))
        out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_var(other)
        out = Var(self.data / other.data, (self, other))
        def bw(g):
            self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            other._accumulate(_unbroadcast(-g * self.data / other.data**2,
                                           other.data.shape))
        out._backward = bw
        return out

    def __rtruediv__(self, other):
        return as_var(other) / self

    def __pow__(self, exponent: float):
        out = Var(self.data ** exponent, (self,))
        def bw(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1))
        out._backward = bw
        return out

    def __matmul__(self, other):
        other = as_var(other)
        out = Var(self.data @ other.data, (self, other))
        def bw(g):
            a, b = self.data, other.data
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            self._accumulate(_unbroadcast(ga, a.shape))
            other._accumulate(_unbroadcast(gb, b.shape))
        out._backward = bw
        return out

    # --- elementwise nonlinearities ----------------------------------------

    def exp(self):
        out = Var(np.exp(self.data), (self,))
        out._backward = lambda g: self._accumulate(g * out.data)
        return out

    def log(self):
        out = Var(np.log(self.data), (self,))
        out._backward = lambda g: self._accumulate(g / self.data)
        return out

    def sqrt(self):
        out = Var(np.sqrt(self.data), (self,))
        out._backward = lambda g: self._accumulate(g * 0.5 / out.data)
        return out

    def tanh(self):
        out = Var(np.tanh(self.data), (self,))
        out._backward = lambda g: self._accumulate(g * (1.0 - out.data**2))
        return out

    def sigmoid(self):
        out = Var(1.0 / (1.0 + np.exp(-self.data)), (self,))
        out._backward = lambda g: self._accumulate(g * out.data * (1.0 - out.data))
        return out

    def relu(self):
        out = Var(np.maximum(self.data, 0.0), (self,))
        out._backward = lambda g: self._accumulate(g * (self.data > 0))
        return out

    # --- reductions and shape ops -------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Var(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        def bw(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(gg, self.data.shape).copy())
        out._backward = bw
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def reshape(self, *shape):
        out = Var(self.data.reshape(*shape), (self,))
        out._backward = lambda g: self._accumulate(g.reshape(self.data.shape))
        return out

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.data.ndim)))
        inv = np.argsort(axes)
        out = Var(self.data.transpose(axes), (self,))
        out._backward = lambda g: self._accumulate(g.transpose(inv))
        return out

    def __getitem__(self, key):
        out = Var(self.data[key], (self,))
        parts = key if isinstance(key, tuple) else (key,)
        basic = all(isinstance(k, (int, np.integer, slice, type(None),
                                   type(Ellipsis))) for k in parts)
        def bw(g):
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            if basic:
                self.grad[key] += g
            else:
                np.add.at(self.grad, key, g)
        out._backward = bw
        return out

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar output")
        order = []
        seen = set()
        stack = [(self, False)]
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
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))


def concat(vars_, axis=0) -> Var:
    vars_ = [as_var(v) for v in vars_]
    out = Var(np.concatenate([v.data for v in vars_], axis=axis), tuple(vars_))
    sizes = [v.data.shape[axis] for v in vars_]
    offsets = np.cumsum([0] + sizes)
    def bw(g):
        for v, a, b in zip(vars_, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(a, b)
            v._accumulate(g[tuple(sl)])
    out._backward = bw
    return out


def stack(vars_, axis=0) -> Var:
    vars_ = [as_var(v) for v in vars_]
    out = Var(np.stack([v.data for v in vars_], axis=axis), tuple(vars_))
    def bw(g):
        for i, v in enumerate(vars_):
            v._accumulate(np.take(g, i, axis=axis))
    out._backward = bw
    return out


def logsumexp(x: Var, axis=None, keepdims=False) -> Var:
    """Numerically stable log-sum-exp; the max shift is treated as constant,
    which is exact because the expression is shift invariant."""
    shift = np.max(x.data, axis=axis, keepdims=True)
    z = (x - Var(shift)).exp().sum(axis=axis, keepdims=keepdims)
    out = z.log()
    if not keepdims and axis is not None:
        shift = np.squeeze(shift, axis=axis)
    elif not keepdims and axis is None:
        shift = shift.reshape(())
    return out + Var(shift)
