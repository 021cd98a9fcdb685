"""Minimal tape-free reverse-mode differentiation over numpy arrays."""
import numpy as np


class Node:
    """A value in a computation, plus the rule to push gradients to its parents.

    ``backward_fn`` maps the upstream gradient to a tuple with one entry per
    parent (``None`` where a parent needs no gradient).
    """

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = any(p.requires_grad for p in self.parents)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self):
        return float(self.value)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, dtype={self.value.dtype})"


class Parameter(Node):
    """A trainable leaf. ``kind`` is one of ``weight``, ``bias`` or ``pelu``."""

    __slots__ = ("name", "kind", "trainable", "_value")

    KINDS = ("weight", "bias", "pelu")

    def __init__(self, value, name, kind="weight", trainable=True):
        if kind not in self.KINDS:
            raise ValueError(f"unknown parameter kind {kind!r}")
        super().__init__(np.asarray(value))
        self.name = name
        self.kind = kind
        self.trainable = trainable
        self.requires_grad = trainable
        self.grad = np.zeros_like(self.value)

    @property
    def value(self):
        return self._value

    @value.setter
    def value(self, v):
        # ufuncs on 0-d arrays return numpy scalars; keep an ndarray
        self._value = np.asarray(v)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, kind={self.kind}, shape={self.value.shape})"


def as_node(x):
    return x if isinstance(x, Node) else Node(np.asarray(x))


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root):
    """Accumulate d(root)/d(parameter) into every reachable ``Parameter.grad``."""
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
    order = _topological(root)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if isinstance(parent, Parameter):
                parent.grad += np.reshape(g, parent.value.shape)
            elif parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
        if not isinstance(node, Parameter):
            node.grad = None
    if isinstance(root, Parameter):
        root.grad = np.ones_like(root.value)
