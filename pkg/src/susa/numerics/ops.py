"""Differentiable operations on :class:`Node` values."""
import numpy as np

from . import kernels as K
from .graph import Node, as_node


def conv2d(x, w, pad="same"):
    x, w = as_node(x), as_node(w)
    out = K.conv2d_forward(x.value, w.value, pad)

    def back(g):
        return K.conv2d_backward(g, x.value, w.value, pad)
    return Node(out, (x, w), back)


def bias_add(x, b):
    x, b = as_node(x), as_node(b)
    if b.value.shape != (x.value.shape[-1],):
        raise ValueError(f"bias shape {b.value.shape} does not match channels of {x.value.shape}")
    axes = tuple(range(x.value.ndim - 1))
    return Node(x.value + b.value, (x, b), lambda g: (g, g.sum(axis=axes)))


def dense(x, w):
    x, w = as_node(x), as_node(w)
    if x.value.shape[-1] != w.value.shape[0]:
        raise ValueError(f"dense shape mismatch: input {x.value.shape} vs weights {w.value.shape}")
    return Node(x.value @ w.value, (x, w), lambda g: (g @ w.value.T, x.value.T @ g))


def pool2d(x, kind="mean", window=2, stride=2, pad="valid"):
    x = as_node(x)
    out, cache = K.pool2d_forward(x.value, kind, window, stride, pad)
    return Node(out, (x,), lambda g: (K.pool2d_backward(g, cache),))


def upsample_nearest2d(x, factor):
    x = as_node(x)
    out = K.upsample_nearest2d_forward(x.value, factor)
    return Node(out, (x,), lambda g: (K.upsample_nearest2d_backward(g, factor),))


def pelu(x, a, b):
    x, a, b = as_node(x), as_node(a), as_node(b)
    out, e = K.pelu_forward(x.value, a.value, b.value)

    def back(g):
        dh, da, db = K.pelu_backward(g, x.value, a.value, b.value, e)
        return dh, np.asarray(da, a.value.dtype), np.asarray(db, b.value.dtype)
    return Node(out, (x, a, b), back)


def relu(x):
    x = as_node(x)
    return Node(K.relu_forward(x.value), (x,), lambda g: (K.relu_backward(g, x.value),))


def concat(nodes, axis=-1):
    nodes = [as_node(n) for n in nodes]
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))
    return Node(np.concatenate([n.value for n in nodes], axis=axis), nodes, back)


def softmax(x):
    x = as_node(x)
    p = K.softmax(x.value)

    def back(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)
    return Node(p, (x,), back)


def stop_gradient(x):
    return Node(as_node(x).value)


def add_noise(x, noise):
    x = as_node(x)
    return Node(x.value + noise, (x,), lambda g: (g,))


def mse(prediction, target):
    prediction, target = as_node(prediction), as_node(target)
    value, diff = K.mse_forward(prediction.value, target.value)
    return Node(np.asarray(value, diff.dtype), (prediction, target),
                lambda g: K.mse_backward(g, diff))


def softmax_cross_entropy(logits, labels):
    logits = as_node(logits)
    value, cache = K.softmax_xent_forward(logits.value, labels)
    return Node(np.asarray(value, logits.value.dtype), (logits,),
                lambda g: (K.softmax_xent_backward(g, cache),))


def weighted_sum(terms, weights):
    """``sum_j weights[j] * terms[j]`` over scalar nodes; zero-weight terms are dropped."""
    terms = [as_node(t) for t in terms]
    if len(terms) != len(weights):
        raise ValueError(f"{len(terms)} terms but {len(weights)} weights")
    kept = [(t, float(w)) for t, w in zip(terms, weights) if w != 0]
    if not kept:
        dtype = terms[0].value.dtype if terms else np.float64
        return Node(np.zeros((), dtype))
    value = kept[0][1] * kept[0][0].value
    for t, w in kept[1:]:
        value = value + w * t.value
    coeffs = [w for _, w in kept]

    def back(g):
        return tuple((w * g).astype(t.value.dtype) for (t, _), w in zip(kept, coeffs))
    return Node(np.asarray(value, kept[0][0].value.dtype), [t for t, _ in kept], back)


def add(a, b):
    a, b = as_node(a), as_node(b)
    return Node(a.value + b.value, (a, b), lambda g: (g, g))


def take_rows(x, rows):
    x = as_node(x)
    rows = np.asarray(rows)

    def back(g):
        full = np.zeros_like(x.value)
        np.add.at(full, rows, g)
        return (full,)
    return Node(x.value[rows], (x,), back)
