"""Reverse-mode automatic differentiation on a per-batch tape.

Values carry float64 numpy payloads (a plain scalar is the 0-d array case)
so that batched math stays vectorized while the graph itself stays small.
A tape is built during one forward pass, swept once by ``backward`` and then
discarded; parameters live outside the tape and are re-bound every batch.
"""

from __future__ import annotations

import numpy as np


class TapeError(Exception):
    pass


class DivisionByZero(TapeError):
    """Raised when a division would put a non-finite payload on the tape."""


class NaNPayload(TapeError):
    """Raised when an operation produces NaN; NaNs never propagate silently."""


class NonScalarRoot(TapeError):
    """backward() requires a single scalar root."""


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` to undo numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Value:
    """One node of the computation graph. Create through a Tape, not directly."""

    __slots__ = ("tape", "idx", "data", "grad", "parents", "vjps", "op", "trainable")

    def __init__(self, tape, idx, data, parents, vjps, op, trainable=False):
        self.tape = tape
        self.idx = idx
        self.data = data
        self.grad = None
        self.parents = parents
        self.vjps = vjps
        self.op = op
        self.trainable = trainable

    @property
    def shape(self):
        return self.data.shape

    def _lift(self, other):
        if isinstance(other, Value):
            return other
        return self.tape.const(other)

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        o = self._lift(other)
        return self.tape._make(
            self.data + o.data, [self, o],
            [lambda g: _unbroadcast(g, self.data.shape),
             lambda g: _unbroadcast(g, o.data.shape)], "add")

    __radd__ = __add__

    def __sub__(self, other):
        o = self._lift(other)
        return self.tape._make(
            self.data - o.data, [self, o],
            [lambda g: _unbroadcast(g, self.data.shape),
             lambda g: _unbroadcast(-g, o.data.shape)], "sub")

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        o = self._lift(other)
        return self.tape._make(
            self.data * o.data, [self, o],
            [lambda g: _unbroadcast(g * o.data, self.data.shape),
             lambda g: _unbroadcast(g * self.data, o.data.shape)], "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._lift(other)
        if np.any(o.data == 0.0):
            raise DivisionByZero("division by zero on the tape")
        return self.tape._make(
            self.data / o.data, [self, o],
            [lambda g: _unbroadcast(g / o.data, self.data.shape),
             lambda g: _unbroadcast(-g * self.data / (o.data * o.data),
                                    o.data.shape)], "div")

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __neg__(self):
        return self.tape._make(-self.data, [self], [lambda g: -g], "neg")

    def __matmul__(self, other):
        o = self._lift(other)
        a, b = self.data, o.data
        if a.ndim == 1 and b.ndim == 1:
            vjps = [lambda g: g * b, lambda g: g * a]
        elif a.ndim == 2 and b.ndim == 1:
            vjps = [lambda g: np.outer(g, b), lambda g: a.T @ g]
        elif a.ndim == 1 and b.ndim == 2:
            vjps = [lambda g: b @ g, lambda g: np.outer(a, g)]
        else:
            vjps = [lambda g: g @ b.T, lambda g: a.T @ g]
        return self.tape._make(a @ b, [self, o], vjps, "matmul")

    # -- reductions / shape ops --------------------------------------------
    def sum(self, axis=None, keepdims=False):
        shape = self.data.shape

        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, shape).copy()
            gg = g if keepdims else np.expand_dims(g, axis)
            return np.broadcast_to(gg, shape).copy()

        return self.tape._make(self.data.sum(axis=axis, keepdims=keepdims),
                               [self], [vjp], "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def cumsum(self, axis):
        def vjp(g):
            return np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)

        return self.tape._make(np.cumsum(self.data, axis=axis), [self], [vjp],
                               "cumsum")

    def reshape(self, *shape):
        old = self.data.shape
        return self.tape._make(self.data.reshape(*shape), [self],
                               [lambda g: g.reshape(old)], "reshape")

    def __getitem__(self, key):
        shape = self.data.shape

        def vjp(g):
            out = np.zeros(shape)
            np.add.at(out, key, g)
            return out

        return self.tape._make(self.data[key], [self], [vjp], "getitem")

    # -- elementwise nonlinearities ----------------------------------------
    def exp(self):
        y = np.exp(self.data)
        return self.tape._make(y, [self], [lambda g: g * y], "exp")

    def log(self):
        return self.tape._make(np.log(self.data), [self],
                               [lambda g: g / self.data], "log")

    def sqrt(self):
        y = np.sqrt(self.data)
        return self.tape._make(y, [self], [lambda g: g * 0.5 / y], "sqrt")

    def abs(self):
        s = np.sign(self.data)
        return self.tape._make(np.abs(self.data), [self], [lambda g: g * s],
                               "abs")

    def clamp(self, lo, hi):
        inside = ((self.data >= lo) & (self.data <= hi)).astype(np.float64)
        return self.tape._make(np.clip(self.data, lo, hi), [self],
                               [lambda g: g * inside], "clamp")


def minimum(a: Value, b):
    b = a._lift(b)
    take_a = (a.data <= b.data).astype(np.float64)
    return a.tape._make(
        np.minimum(a.data, b.data), [a, b],
        [lambda g: _unbroadcast(g * take_a, a.data.shape),
         lambda g: _unbroadcast(g * (1.0 - take_a), b.data.shape)], "min")


def maximum(a: Value, b):
    b = a._lift(b)
    take_a = (a.data >= b.data).astype(np.float64)
    return a.tape._make(
        np.maximum(a.data, b.data), [a, b],
        [lambda g: _unbroadcast(g * take_a, a.data.shape),
         lambda g: _unbroadcast(g * (1.0 - take_a), b.data.shape)], "max")


def where(mask, a: Value, b):
    """Select by a constant boolean mask (the mask itself is not differentiated)."""
    b = a._lift(b)
    m = np.asarray(mask, dtype=np.float64)
    return a.tape._make(
        np.where(mask, a.data, b.data), [a, b],
        [lambda g: _unbroadcast(g * m, a.data.shape),
         lambda g: _unbroadcast(g * (1.0 - m), b.data.shape)], "where")


def concat(values, axis=-1):
    tape = values[0].tape
    sizes = [v.data.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def make_vjp(i):
        return lambda g: np.split(g, splits, axis=axis)[i]

    return tape._make(np.concatenate([v.data for v in values], axis=axis),
                      list(values), [make_vjp(i) for i in range(len(values))],
                      "concat")


# -- activations ------------------------------------------------------------

def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus_np(x):
    # identity branch past 30 to avoid exp overflow
    return np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))


def relu(x: Value):
    mask = (x.data > 0).astype(np.float64)
    return x.tape._make(np.maximum(x.data, 0.0), [x], [lambda g: g * mask],
                        "relu")


def softplus(x: Value):
    d = _sigmoid_np(x.data)
    return x.tape._make(_softplus_np(x.data), [x], [lambda g: g * d],
                        "softplus")


def sigmoid(x: Value):
    y = _sigmoid_np(x.data)
    return x.tape._make(y, [x], [lambda g: g * y * (1.0 - y)], "sigmoid")


def tanh(x: Value):
    y = np.tanh(x.data)
    return x.tape._make(y, [x], [lambda g: g * (1.0 - y * y)], "tanh")


_ACTIVATIONS = {
    "relu": relu,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "identity": lambda x: x,
}

ACTIVATIONS_NP = {
    "relu": lambda x: np.maximum(x, 0.0),
    "softplus": _softplus_np,
    "sigmoid": _sigmoid_np,
    "tanh": np.tanh,
    "identity": lambda x: x,
}


def activate(x: Value, kind: str) -> Value:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise TapeError(f"unknown activation {kind!r}") from None


_BINOPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "min": minimum,
    "max": maximum,
}


def value_op(a: Value, b, kind: str) -> Value:
    try:
        return _BINOPS[kind](a, b)
    except KeyError:
        raise TapeError(f"unknown binary op {kind!r}") from None


class Tape:
    """Arena of Values for one forward/backward pass."""

    def __init__(self):
        self.nodes = []
        self._swept = False

    def _make(self, data, parents, vjps, op, trainable=False):
        data = _as_array(data)
        if np.isnan(data).any():
            raise NaNPayload(f"NaN payload produced by op {op!r}")
        v = Value(self, len(self.nodes), data, parents, vjps, op, trainable)
        self.nodes.append(v)
        return v

    def const(self, data):
        return self._make(data, [], [], "const")

    def param(self, data):
        return self._make(data, [], [], "param", trainable=True)

    def backward(self, root: Value):
        """Accumulate d(root)/d(node) into node.grad for every reachable node."""
        if root.tape is not self:
            raise TapeError("root belongs to a different tape")
        if root.data.size != 1:
            raise NonScalarRoot(f"root has shape {root.data.shape}")
        if self._swept:
            raise TapeError("tape already swept; call zero_grad() first")
        self._swept = True

        reachable = np.zeros(len(self.nodes), dtype=bool)
        stack = [root]
        reachable[root.idx] = True
        while stack:
            node = stack.pop()
            for p in node.parents:
                if not reachable[p.idx]:
                    reachable[p.idx] = True
                    stack.append(p)

        root.grad = np.ones_like(root.data)
        for idx in range(root.idx, -1, -1):
            if not reachable[idx]:
                continue
            node = self.nodes[idx]
            if node.grad is None:
                continue
            g = node.grad
            for parent, vjp in zip(node.parents, node.vjps):
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad = parent.grad + contrib

    def zero_grad(self):
        for node in self.nodes:
            node.grad = None
        self._swept = False

    def release(self):
        """Terminal cleanup: drop the tape's node registry so the graph is
        reclaimable by reference counting alone (tape and nodes reference
        each other, which otherwise defers freeing large payloads to a
        cyclic-gc pass). Existing Values keep data and grad; no further
        backward passes are possible."""
        self.nodes.clear()
        self._swept = True
