"""Randomised finite-difference checks for every differentiable kernel and both objectives."""
import numpy as np

from .mcae import McaeConfig, build_mcae
from .numerics import Parameter, grad_check, ops
from .ssmlp import SsmlpConfig, build_ssmlp, ssmlp_loss

TOLERANCE = 1e-5
# A central difference at h = 1e-5 carries about eps * |loss| / h of rounding
# noise. In float64 that swamps the smallest gradient entries of the deep
# objectives, so checks run in extended precision where the platform has it.
PRECISION = np.longdouble if np.finfo(np.longdouble).eps < np.finfo(np.float64).eps else np.float64


def _param(rng, shape, name, scale=1.0):
    return Parameter((rng.standard_normal(shape) * scale).astype(PRECISION), name)


def _positive(rng, name):
    return Parameter(np.asarray(rng.uniform(0.5, 2.0), PRECISION), name, "pelu")


def _spatial(rng):
    n = int(rng.integers(1, 3))
    return n, int(rng.integers(3, 7)), int(rng.integers(3, 7)), int(rng.integers(1, 4))


def _away_from_zero(rng, shape, margin=0.05):
    v = rng.standard_normal(shape)
    return np.where(np.abs(v) < margin, np.sign(v + 1e-12) * margin + v, v)


def _target(rng, node_value):
    return rng.standard_normal(node_value.shape)


def case_conv2d(rng):
    n, h, w, c = _spatial(rng)
    k = int(rng.choice([1, 3]))
    pad = str(rng.choice(["same", "edge", "valid"])) if min(h, w) >= k else "edge"
    x = _param(rng, (n, h, w, c), "x")
    wt = _param(rng, (k, k, c, int(rng.integers(1, 4))), "w")
    t = _target(rng, ops.conv2d(x, wt, pad).value)
    return (lambda: ops.mse(ops.conv2d(x, wt, pad), t)), [x, wt]


def case_bias_add(rng):
    x = _param(rng, _spatial(rng), "x")
    b = _param(rng, (x.value.shape[-1],), "b")
    t = _target(rng, x.value)
    return (lambda: ops.mse(ops.bias_add(x, b), t)), [x, b]


def case_dense(rng):
    x = _param(rng, (int(rng.integers(1, 5)), int(rng.integers(1, 6))), "x")
    w = _param(rng, (x.value.shape[1], int(rng.integers(1, 6))), "w")
    t = _target(rng, x.value @ w.value)
    return (lambda: ops.mse(ops.dense(x, w), t)), [x, w]


def case_mean_pool(rng):
    x = _param(rng, _spatial(rng), "x")
    window = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    t = _target(rng, ops.pool2d(x, "mean", window, stride, "same").value)
    return (lambda: ops.mse(ops.pool2d(x, "mean", window, stride, "same"), t)), [x]


def case_max_pool(rng):
    n, h, w, c = _spatial(rng)
    # well-separated values so a finite-difference step never flips an argmax
    values = rng.permutation(n * h * w * c).reshape(n, h, w, c) * 0.01
    x = Parameter(values.astype(PRECISION), "x")
    t = _target(rng, ops.pool2d(x, "max", 2, 2, "valid").value)
    return (lambda: ops.mse(ops.pool2d(x, "max", 2, 2, "valid"), t)), [x]


def case_upsample(rng):
    x = _param(rng, _spatial(rng), "x")
    f = int(rng.integers(1, 4))
    t = _target(rng, ops.upsample_nearest2d(x, f).value)
    return (lambda: ops.mse(ops.upsample_nearest2d(x, f), t)), [x]


def case_pelu(rng):
    x = Parameter(_away_from_zero(rng, _spatial(rng)).astype(PRECISION), "x")
    a, b = _positive(rng, "a"), _positive(rng, "b")
    t = _target(rng, x.value)
    return (lambda: ops.mse(ops.pelu(x, a, b), t)), [x, a, b]


def case_relu(rng):
    x = Parameter(_away_from_zero(rng, _spatial(rng)).astype(PRECISION), "x")
    t = _target(rng, x.value)
    return (lambda: ops.mse(ops.relu(x), t)), [x]


def case_concat(rng):
    n, h, w, _ = _spatial(rng)
    x = _param(rng, (n, h, w, int(rng.integers(1, 4))), "x")
    y = _param(rng, (n, h, w, int(rng.integers(1, 4))), "y")
    t = _target(rng, ops.concat([x, y]).value)
    return (lambda: ops.mse(ops.concat([x, y]), t)), [x, y]


def case_softmax(rng):
    x = _param(rng, (int(rng.integers(1, 5)), int(rng.integers(2, 6))), "x")
    t = rng.uniform(size=x.value.shape)
    return (lambda: ops.mse(ops.softmax(x), t)), [x]


def case_mse(rng):
    shape = _spatial(rng)
    p, t = _param(rng, shape, "prediction"), _param(rng, shape, "target")
    return (lambda: ops.mse(p, t)), [p, t]


def case_softmax_xent(rng):
    n, c = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    logits = _param(rng, (n, c), "logits", 2.0)
    labels = rng.integers(0, c, n)
    return (lambda: ops.softmax_cross_entropy(logits, labels)), [logits]


def _jitter(model, rng, max_slope=None):
    """Perturb weights and draw PELU parameters; ``max_slope`` bounds a/b and b/a."""
    for p in model.parameters():
        if p.kind == "pelu" and max_slope and p.name.endswith("pelu_b"):
            a = model.params[p.name.replace("pelu_b", "pelu_a")].value
            p.value = a * np.exp(rng.uniform(-np.log(max_slope), np.log(max_slope)))
        elif p.kind == "pelu":
            p.value = np.asarray(rng.uniform(0.5, 2.0), p.value.dtype)
        else:
            p.value = p.value + 0.1 * rng.standard_normal(p.value.shape)


def case_mcae_objective(rng):
    config = McaeConfig(width_scale=1 / 128, loss_weights=(1.0, 0.1, 0.01, 0.01))
    bands = int(rng.integers(1, 4))
    model = build_mcae(config, bands, int(rng.integers(1 << 30)), PRECISION)
    _jitter(model, rng, max_slope=4 / 3)
    x = rng.standard_normal((int(rng.integers(1, 3)), 8, 8, bands)).astype(PRECISION)
    return (lambda: model.loss(x)[0]), model.parameters()


def case_ssmlp_objective(rng, labeled=True):
    config = SsmlpConfig(hidden_widths=(16, 9, 5, 4))
    f, c = int(rng.integers(2, 7)), int(rng.integers(2, 5))
    model = build_ssmlp(config, f, c, int(rng.integers(1 << 30)), PRECISION)
    # deep PELU stacks with unbalanced a/b blow the logits up
    _jitter(model, rng, max_slope=4 / 3)
    x = rng.standard_normal((int(rng.integers(2, 7)), f)).astype(PRECISION)
    # keep the softmax out of saturation, where differences only see round-off
    logits = model.encode(x)[1].value
    params = {q.name: q for q in model.parameters()}
    shrink = min(1.0, 3.0 / max(np.abs(logits).max(), 1e-12))
    params["cls.weight"].value = params["cls.weight"].value * shrink
    params["cls.bias"].value = params["cls.bias"].value * shrink
    labels = rng.integers(0, c, int(rng.integers(1, len(x) + 1))) if labeled else None
    # the class-level target is a constant: freeze it at the base point
    frozen = model.forward(x)["probs"].value.copy()
    return (lambda: ssmlp_loss(model.forward(x), labels, config.lambda_recon, frozen)[0]), model.parameters()


CASES = {
    "conv2d": case_conv2d,
    "bias_add": case_bias_add,
    "dense": case_dense,
    "pool2d_mean": case_mean_pool,
    "pool2d_max": case_max_pool,
    "upsample_nearest2d": case_upsample,
    "pelu": case_pelu,
    "relu": case_relu,
    "concat": case_concat,
    "softmax": case_softmax,
    "loss_mse": case_mse,
    "loss_softmax_crossentropy": case_softmax_xent,
    "mcae_objective": case_mcae_objective,
    "ssmlp_objective_labeled": case_ssmlp_objective,
    "ssmlp_objective_unlabeled": lambda rng: case_ssmlp_objective(rng, labeled=False),
}

# composite objectives have many parameters; probe a random subset of each
MAX_ELEMENTS = {"mcae_objective": 6, "ssmlp_objective_labeled": 12, "ssmlp_objective_unlabeled": 12}


def run_gradient_suite(trials=20, seed=0, cases=None):
    """Worst relative error per case over ``trials`` random instances."""
    rng = np.random.default_rng(seed)
    results = {}
    for name in cases or CASES:
        worst = 0.0
        for _ in range(trials):
            fn, params = CASES[name](rng)
            err = grad_check(fn, params, max_elements=MAX_ELEMENTS.get(name), seed=int(rng.integers(1 << 30)))
            worst = max(worst, err)
        results[name] = worst
    return results
