"""Array-level forward and backward kernels.

All spatial tensors are channel-last ``(N, H, W, C)``. Backward functions take
the upstream gradient plus whatever the forward pass cached and return input
gradients in the same order as the forward arguments.
"""
import numpy as np


def check_finite(array, name="tensor"):
    """Raise ``FloatingPointError`` if ``array`` holds NaN or Inf."""
    if not np.all(np.isfinite(array)):
        bad = int(np.size(array) - np.count_nonzero(np.isfinite(array)))
        raise FloatingPointError(f"{name}: {bad} non-finite element(s)")
    return array


def _require_4d(x, what):
    if x.ndim != 4:
        raise ValueError(f"{what} expects a 4-D (N, H, W, C) tensor, got shape {x.shape}")


def _conv_padding(k, pad):
    if pad in ("same", "edge"):
        if k % 2 != 1:
            raise ValueError(f"same-padded convolution needs an odd kernel, got k={k}")
        return k // 2
    if pad == "valid":
        return 0
    raise ValueError(f"unknown padding mode {pad!r}")


def _pad_spatial(x, p, pad):
    if not p:
        return x
    widths = ((0, 0), (p, p), (p, p), (0, 0))
    return np.pad(x, widths, mode="edge") if pad == "edge" else np.pad(x, widths)


def _fold_edges(dxp, p):
    """Gradient of edge padding: every padded row/column adds onto the edge it copies."""
    h, w = dxp.shape[1] - 2 * p, dxp.shape[2] - 2 * p
    rows = np.clip(np.arange(-p, h + p), 0, h - 1)
    cols = np.clip(np.arange(-p, w + p), 0, w - 1)
    folded = np.zeros((dxp.shape[0], h, dxp.shape[2], dxp.shape[3]), dxp.dtype)
    np.add.at(folded, (slice(None), rows), dxp)
    out = np.zeros((dxp.shape[0], h, w, dxp.shape[3]), dxp.dtype)
    np.add.at(out, (slice(None), slice(None), cols), folded)
    return out


# -- convolution -----------------------------------------------------------

def conv2d_forward(x, w, pad="same"):
    """Stride-1 2-D cross-correlation, ``w`` shaped ``(k, k, Fin, Fout)``.

    ``pad`` is ``"same"`` (zeros), ``"edge"`` (replicated border pixels, same
    output size) or ``"valid"``.
    """
    _require_4d(x, "conv2d")
    if w.ndim != 4 or w.shape[0] != w.shape[1]:
        raise ValueError(f"conv2d weights must be (k, k, Fin, Fout), got {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise ValueError(
            f"conv2d shape mismatch: input {x.shape} has {x.shape[3]} channels, "
            f"weights {w.shape} expect {w.shape[2]}")
    k = w.shape[0]
    p = _conv_padding(k, pad)
    n, h, wd, _ = x.shape
    ho, wo = h + 2 * p - k + 1, wd + 2 * p - k + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d input {x.shape} smaller than kernel {w.shape}")
    xp = _pad_spatial(x, p, pad)
    out = np.zeros((n, ho, wo, w.shape[3]), dtype=np.result_type(x, w))
    for i in range(k):
        for j in range(k):
            out += xp[:, i:i + ho, j:j + wo, :] @ w[i, j]
    return out


def conv2d_backward(dout, x, w, pad="same"):
    k = w.shape[0]
    p = _conv_padding(k, pad)
    ho, wo = dout.shape[1], dout.shape[2]
    # input gradient is a full correlation with the flipped, transposed kernel
    flipped = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
    if pad == "edge":
        # gradient w.r.t. the padded input, then fold the copies back
        q = k - 1
        dpad = np.pad(dout, ((0, 0), (q, q), (q, q), (0, 0))) if q else dout
        dx = _fold_edges(conv2d_forward(dpad, flipped, "valid"), p)
    else:
        q = k - 1 - p
        dpad = np.pad(dout, ((0, 0), (q, q), (q, q), (0, 0))) if q else dout
        dx = conv2d_forward(dpad, flipped, "valid")
    xp = _pad_spatial(x, p, pad)
    channels_first = np.ascontiguousarray(xp.transpose(3, 0, 1, 2))
    flat_out = dout.reshape(-1, dout.shape[3])
    dw = np.empty(w.shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            patch = channels_first[:, :, i:i + ho, j:j + wo].reshape(x.shape[3], -1)
            dw[i, j] = patch @ flat_out
    return dx, dw


# -- pooling / resampling --------------------------------------------------

def _pool_geometry(h, w, window, stride, pad):
    if window < 1 or stride < 1:
        raise ValueError(f"pool window and stride must be >= 1 (got {window}, {stride})")
    if pad == "valid":
        if window > h or window > w:
            raise ValueError(f"pool window {window} larger than input {h}x{w}")
        ho = (h - window) // stride + 1
        wo = (w - window) // stride + 1
        return ho, wo, (0, 0), (0, 0)
    if pad == "same":
        ho, wo = -(-h // stride), -(-w // stride)
        ph = max((ho - 1) * stride + window - h, 0)
        pw = max((wo - 1) * stride + window - w, 0)
        if window > h + ph or window > w + pw:
            raise ValueError(f"pool window {window} larger than padded input")
        return ho, wo, (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)
    raise ValueError(f"unknown padding mode {pad!r}")


def _window_slices(window, stride, ho, wo):
    for di in range(window):
        for dj in range(window):
            yield (di * window + dj,
                   slice(di, di + stride * (ho - 1) + 1, stride),
                   slice(dj, dj + stride * (wo - 1) + 1, stride))


def pool2d_forward(x, kind="mean", window=2, stride=2, pad="valid"):
    """Mean or max pooling. Returns ``(out, cache)``.

    Mean pooling divides by the number of non-padded cells in each window.
    """
    _require_4d(x, "pool2d")
    n, h, w, c = x.shape
    ho, wo, (pt, pb), (pl, pr) = _pool_geometry(h, w, window, stride, pad)
    pads = ((0, 0), (pt, pb), (pl, pr), (0, 0))
    geometry = (ho, wo, pt, pl)
    if kind == "mean":
        xp = np.pad(x, pads)
        ones = np.pad(np.ones((h, w), dtype=x.dtype), pads[1:3])
        out = np.zeros((n, ho, wo, c), dtype=x.dtype)
        count = np.zeros((ho, wo), dtype=x.dtype)
        for _, si, sj in _window_slices(window, stride, ho, wo):
            out += xp[:, si, sj, :]
            count += ones[si, sj]
        out /= count[None, :, :, None]
        return out, (kind, window, stride, x.shape, geometry, count)
    if kind == "max":
        xp = np.pad(x, pads, constant_values=-np.inf)
        out = np.full((n, ho, wo, c), -np.inf, dtype=x.dtype)
        arg = np.zeros((n, ho, wo, c), dtype=np.int32)
        for idx, si, sj in _window_slices(window, stride, ho, wo):
            cand = xp[:, si, sj, :]
            better = cand > out
            out = np.where(better, cand, out)
            arg[better] = idx
        return out, (kind, window, stride, x.shape, geometry, arg)
    raise ValueError(f"unknown pooling kind {kind!r}")


def pool2d_backward(dout, cache):
    kind, window, stride, shape, (ho, wo, pt, pl), aux = cache
    n, h, w, c = shape
    hp = max(h + pt, stride * (ho - 1) + window)
    wp = max(w + pl, stride * (wo - 1) + window)
    dxp = np.zeros((n, hp, wp, c), dtype=dout.dtype)
    if kind == "mean":
        scaled = dout / aux[None, :, :, None]
        for _, si, sj in _window_slices(window, stride, ho, wo):
            dxp[:, si, sj, :] += scaled
    else:
        for idx, si, sj in _window_slices(window, stride, ho, wo):
            dxp[:, si, sj, :] += np.where(aux == idx, dout, 0)
    return dxp[:, pt:pt + h, pl:pl + w, :]


def upsample_nearest2d_forward(x, factor):
    _require_4d(x, "upsample_nearest2d")
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x.copy()
    return np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)


def upsample_nearest2d_backward(dout, factor):
    if factor == 1:
        return dout
    n, h, w, c = dout.shape
    return dout.reshape(n, h // factor, factor, w // factor, factor, c).sum(axis=(2, 4))


# -- activations -----------------------------------------------------------

def pelu_forward(h, a, b):
    """Parametric ELU: ``(a/b) h`` for ``h >= 0``, ``a (exp(h/b) - 1)`` otherwise.

    Returns ``(out, e)`` where ``e = exp(min(h, 0) / b)`` is reused by the
    backward pass.
    """
    a = np.asarray(a, h.dtype)[()]
    b = np.asarray(b, h.dtype)[()]
    if not (a > 0 and b > 0):
        raise ValueError(f"PELU parameters must be positive, got a={a}, b={b}")
    e = np.exp(np.minimum(h, 0) * (1.0 / b))
    out = np.where(h >= 0, (a / b) * h, a * (e - 1))
    return out.astype(h.dtype, copy=False), e


def pelu_backward(dout, h, a, b, e=None):
    """Gradients with respect to ``h``, ``a`` and ``b`` (the last two summed)."""
    a = np.asarray(a, h.dtype)[()]
    b = np.asarray(b, h.dtype)[()]
    if e is None:
        e = np.exp(np.minimum(h, 0) * (1.0 / b))
    # e == 1 on the linear branch, so both branches share dh and db
    ge = dout * e
    dh = (a / b) * ge
    db = -(a / b ** 2) * np.sum(ge * h)
    da = np.sum(np.where(h >= 0, dout * h * (1.0 / b), ge - dout))
    return dh.astype(dout.dtype, copy=False), da, db


def relu_forward(h):
    return np.maximum(h, 0)


def relu_backward(dout, h):
    return np.where(h > 0, dout, 0).astype(dout.dtype, copy=False)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- losses ----------------------------------------------------------------

def mse_forward(prediction, target):
    if prediction.shape != target.shape:
        raise ValueError(f"MSE shape mismatch: prediction {prediction.shape} vs target {target.shape}")
    diff = prediction - target
    return np.mean(diff * diff), diff


def mse_backward(dloss, diff):
    g = (2.0 / diff.size) * dloss * diff
    return g.astype(diff.dtype, copy=False), (-g).astype(diff.dtype, copy=False)


def _check_labels(labels, n, c):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be integers")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c}): min {labels.min()}, max {labels.max()}")
    return labels


def softmax_xent_forward(logits, labels):
    """Mean negative log-likelihood of the true class, max-subtracted."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be (N, C), got {logits.shape}")
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    if n == 0:
        raise ValueError("cross-entropy over an empty batch")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(lse - z[np.arange(n), labels])
    return loss, (z, lse, labels)


def softmax_xent_backward(dloss, cache):
    z, lse, labels = cache
    n = z.shape[0]
    g = np.exp(z - lse[:, None])
    g[np.arange(n), labels] -= 1
    return (g * (dloss / n)).astype(z.dtype, copy=False)
