"""Central finite-difference checks for composed computations."""
import numpy as np

from .graph import backward

STEP = 1e-5


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def _evaluate(fn, name):
    # keep the loss in its own precision; the difference is taken before rounding
    value = np.asarray(fn().value)[()]
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss while perturbing parameter {name!r}")
    return value


def analytic_gradients(fn, params):
    for p in params:
        p.zero_grad()
    backward(fn())
    return [p.grad.copy() for p in params]


def gradient_errors(fn, params, h=STEP, max_elements=None, seed=0, analytic=None):
    """Per-parameter max relative error between backprop and central differences.

    ``fn`` rebuilds the forward pass from the current parameter values and
    returns a scalar node. ``max_elements`` caps how many entries of each
    parameter are probed (chosen at random with ``seed``). ``analytic`` lets a
    caller supply its own gradients instead of backprop.
    """
    for p in params:
        if not (np.issubdtype(p.value.dtype, np.floating)
                and np.finfo(p.value.dtype).eps <= np.finfo(np.float64).eps):
            raise ValueError(f"gradient checks need float64 or wider parameters; {p.name!r} is {p.value.dtype}")
    if analytic is None:
        analytic = analytic_gradients(fn, params)
    rng = np.random.default_rng(seed)
    errors = {}
    for p, grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, max_elements, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = _evaluate(fn, p.name)
            flat[i] = orig - h
            down = _evaluate(fn, p.name)
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            worst = max(worst, float(relative_error(grad.reshape(-1)[i], numeric)))
        errors[p.name] = worst
    return errors


def grad_check(fn, params, h=STEP, max_elements=None, seed=0, analytic=None):
    """Max relative error over all probed parameter entries."""
    errors = gradient_errors(fn, params, h, max_elements, seed, analytic)
    return max(errors.values()) if errors else 0.0
