"""Minimal reverse-mode autodiff over numpy arrays.

Operations on :class:`Tensor` objects are recorded on the active :class:`Tape`
when at least one input requires a gradient.  The tape stores results in
creation order, which is already a topological order, so the backward pass is a
single reverse sweep.  A tape is meant to live for one optimization step.
"""
from __future__ import annotations

import numpy as np

_TAPES: list["Tape"] = []


class Tape:
    def __init__(self, check_finite: bool = True):
        self.nodes: list[Tensor] = []
        self.check_finite = check_finite

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def gradient(self, loss: "Tensor", wrt):
        """Gradients of scalar ``loss`` with respect to ``wrt`` (a dict name -> Tensor)."""
        if np.size(loss.data) != 1:
            raise ValueError(f"loss must be a scalar, got shape {np.shape(loss.data)}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
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
        return {name: np.array(grads.get(id(t), np.zeros_like(t.data)), dtype=float)
                for name, t in wrt.items()}


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=float)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    tape = _active_tape()
    if tape is not None and tape.check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value produced by '{op}'")
    out = Tensor(data)
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
        tape.nodes.append(out)
    return out


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_op", "__weakref__")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=float)
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = _lift(other)
        a, b = self.data, other.data
        return _make(a + b, (self, other),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = _lift(other)
        a, b = self.data, other.data
        return _make(a - b, (self, other),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")

    def __rsub__(self, other):
        return _lift(other) - self

    def __mul__(self, other):
        other = _lift(other)
        a, b = self.data, other.data
        return _make(a * b, (self, other),
                     lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        a, b = self.data, other.data
        return _make(a / b, (self, other),
                     lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
                     "div")

    def __rtruediv__(self, other):
        return _lift(other) / self

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, k):
        if isinstance(k, Tensor):
            raise TypeError("tensor exponents are not supported")
        a = self.data
        return _make(a ** k, (self,), lambda g: (g * k * a ** (k - 1),), "pow")

    def __matmul__(self, other):
        other = _lift(other)
        a, b = self.data, other.data

        def back(g):
            # promote vectors to matrices so both cases share one rule
            a2 = a[None, :] if a.ndim == 1 else a
            b2 = b[:, None] if b.ndim == 1 else b
            g2 = g
            if a.ndim == 1:
                g2 = np.expand_dims(g2, -2)
            if b.ndim == 1:
                g2 = np.expand_dims(g2, -1)
            ga = g2 @ np.swapaxes(b2, -1, -2)
            gb = np.swapaxes(a2, -1, -2) @ g2
            return ga.reshape(a.shape), gb.reshape(b.shape)

        return _make(a @ b, (self, other), back, "matmul")

    def __rmatmul__(self, other):
        return _lift(other) @ self

    @property
    def T(self):
        return _make(self.data.T, (self,), lambda g: (g.T,), "transpose")

    def __getitem__(self, idx):
        a = self.data

        fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

        def back(g):
            full = np.zeros_like(a)
            if fancy:
                np.add.at(full, idx, g)
            else:
                full[idx] = g
            return (full,)

        return _make(a[idx], (self,), back, "getitem")

    # elementwise functions -------------------------------------------------
    def tanh(self):
        y = np.tanh(self.data)
        return _make(y, (self,), lambda g: (g * (1.0 - y * y),), "tanh")

    def exp(self):
        y = np.exp(self.data)
        return _make(y, (self,), lambda g: (g * y,), "exp")

    def log(self):
        a = self.data
        return _make(np.log(a), (self,), lambda g: (g / a,), "log")

    def sqrt(self):
        y = np.sqrt(self.data)
        return _make(y, (self,), lambda g: (g * 0.5 / y,), "sqrt")

    def softplus(self):
        a = self.data
        # logaddexp(0, x) is the overflow-safe form of log(1 + e^x)
        y = np.logaddexp(0.0, a)
        sig = np.exp(a - y)
        return _make(y, (self,), lambda g: (g * sig,), "softplus")

    def abs(self):
        a = self.data
        return _make(np.abs(a), (self,), lambda g: (g * np.sign(a),), "abs")

    def relu(self):
        a = self.data
        return _make(np.maximum(a, 0.0), (self,), lambda g: (g * (a > 0),), "relu")

    def clip(self, lo, hi):
        a = self.data
        inside = (a >= lo) & (a <= hi)
        return _make(np.clip(a, lo, hi), (self,), lambda g: (g * inside,), "clip")

    # reductions -------------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        a = self.data

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return _make(a.sum(axis=axis, keepdims=keepdims), (self,), back, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def concat(tensors, axis=-1) -> Tensor:
    ts = [_lift(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts),
                 lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def stack(tensors, axis=0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    return _make(np.stack([t.data for t in ts], axis=axis), tuple(ts),
                 lambda g: tuple(np.moveaxis(g, axis, 0)), "stack")


def as_tensor(x) -> Tensor:
    return _lift(x)


def value(x) -> np.ndarray:
    return _data(x)
