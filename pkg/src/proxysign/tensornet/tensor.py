"""Tensor with reverse-mode gradient tracking."""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        # Copy on first write: backward closures may hand out views.
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Propagate gradients from this node to every leaf that requires them.

        Each node's backward rule runs once, after all of its consumers, so
        shared subexpressions accumulate additively.  Intermediate gradients
        and closures are released as the sweep passes them.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is None:
                continue
            if node.grad is not None:
                node._backward(node.grad)
            node._backward = None
            node._parents = ()
            node.grad = None

    # Operators used by the model and the graph tests.
    def __add__(self, other):
        from proxysign.tensornet import ops
        return ops.add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        from proxysign.tensornet import ops
        return ops.mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def sum(self):
        from proxysign.tensornet import ops
        return ops.total(self)


def _as_tensor(x, dtype):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def make_node(data, parents, backward):
    """Wrap an op result, recording the graph edge only when needed."""
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out
