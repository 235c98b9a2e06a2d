"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded on it when
any input requires a gradient.  :func:`backward` walks the tape in reverse
from a scalar loss and stores ``.grad`` on every leaf that requires one.
"""

from __future__ import annotations

import numpy as np

from ..errors import UsageError

_ACTIVE = []


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def __len__(self):
        return len(self.nodes)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


def active_tape():
    return _ACTIVE[-1] if _ACTIVE else None


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def record(data, parents, backward):
    """Wrap ``data`` as the output of an op; put it on the active tape if needed.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append(_Node(out, tuple(parents), backward))
    return out


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return record(a.data + b.data, (a, b), back)

    __radd__ = __add__

    def __neg__(self):
        return record(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb

        return record(a.data * b.data, (a, b), back)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("division by a tensor is not supported")
        return self * (1.0 / scalar)

    def __matmul__(self, other):
        a, b = self, as_tensor(other)
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError("matmul expects 2-D operands")

        def back(g):
            ga = g @ b.data.T if a.requires_grad else None
            gb = a.data.T @ g if b.requires_grad else None
            return ga, gb

        return record(a.data @ b.data, (a, b), back)

    def sum(self, axis=None, keepdims=False):
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return record(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))

    def transpose(self, *axes):
        a = self
        if not axes:
            axes = tuple(reversed(range(a.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()


def backward(tape, loss):
    """Reverse pass from scalar ``loss`` over ``tape``.

    Every leaf tensor on the tape that requires a gradient has ``.grad`` set
    (zeros when the loss does not depend on it).  Returns a dict keyed by
    ``id(leaf)``.
    """
    if not isinstance(tape, Tape) or not tape.nodes:
        raise UsageError("backward called before any forward pass was recorded")
    if loss.size != 1:
        raise UsageError(f"loss must be a scalar, got shape {loss.shape}")
    start = None
    for k in range(len(tape.nodes) - 1, -1, -1):
        if tape.nodes[k].out is loss:
            start = k
            break
    if start is None:
        raise UsageError("loss was not produced on this tape")

    produced = {id(n.out) for n in tape.nodes}
    leaves = {}
    for node in tape.nodes:
        for p in node.parents:
            if p.requires_grad and id(p) not in produced:
                leaves[id(p)] = p

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: start + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64, copy=True)

    out = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros_like(leaf.data) if g is None else g.reshape(leaf.shape)
        out[key] = leaf.grad
    return out
