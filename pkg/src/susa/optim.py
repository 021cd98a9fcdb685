"""Nadam with L2 weight decay, Xavier initialisation and plateau schedules."""
import math
from dataclasses import dataclass, field

import numpy as np

PELU_FLOOR = 1e-2


def fans(shape):
    """(fan_in, fan_out) for dense ``(Fin, Fout)`` or conv ``(k, k, Fin, Fout)`` weights."""
    shape = tuple(shape)
    if len(shape) == 2:
        fan_in, fan_out = shape
    elif len(shape) == 4:
        area = shape[0] * shape[1]
        fan_in, fan_out = area * shape[2], area * shape[3]
    else:
        raise ValueError(f"no fan-in/fan-out convention for shape {shape}")
    if fan_in == 0 or fan_out == 0:
        raise ValueError(f"zero fan for shape {shape}")
    return fan_in, fan_out


def xavier_init(shape, rng_seed, dtype=np.float32):
    """Zero-mean normal with variance ``2 / (fan_in + fan_out)``.

    ``rng_seed`` may be an int or an existing ``numpy.random.Generator``.
    """
    fan_in, fan_out = fans(shape)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return (rng.standard_normal(shape) * std).astype(dtype)


class Nadam:
    """Adam with a Nesterov look-ahead on the first moment (constant momentum).

    Weight decay is gradient-coupled L2 and touches only ``weight`` parameters.
    PELU parameters are clamped to ``PELU_FLOOR`` after every step.
    """

    def __init__(self, lr=2e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params):
        params = [p for p in params if p.trainable]
        for p in params:
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in {p.name!r}; step aborted")
        self.t += 1
        t, b1, b2 = self.t, self.beta1, self.beta2
        c1_next = 1.0 - b1 ** (t + 1)
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for p in params:
            g = p.grad
            if self.weight_decay and p.kind == "weight":
                g = g + self.weight_decay * p.value
            if p.name not in self.m:
                self.m[p.name] = np.zeros_like(p.value)
                self.v[p.name] = np.zeros_like(p.value)
            m = self.m[p.name] = b1 * self.m[p.name] + (1 - b1) * g
            v = self.v[p.name] = b2 * self.v[p.name] + (1 - b2) * g * g
            m_hat = b1 * m / c1_next + (1 - b1) * g / c1
            v_hat = v / c2
            update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.value = (p.value - update).astype(p.value.dtype, copy=False)
            if p.kind == "pelu":
                p.value = np.maximum(p.value, PELU_FLOOR).astype(p.value.dtype, copy=False)


CONTINUE, DROP_LR, STOP = "continue", "drop_lr", "stop"


@dataclass
class PlateauSchedule:
    """Learning-rate drop and early stopping on a stalled validation metric.

    ``mode`` is ``min`` for losses and ``max`` for accuracies. An epoch counts
    as an improvement only if it beats the best so far by at least
    ``min_delta``.
    """

    mode: str = "min"
    drop_patience: int = 5
    stop_patience: int = 10
    factor: float = 10.0
    min_delta: float = 1e-6
    best: float = field(default=None)
    streak: int = 0

    def __post_init__(self):
        if self.mode not in ("min", "max"):
            raise ValueError(f"mode must be 'min' or 'max', got {self.mode!r}")
        if self.stop_patience < self.drop_patience:
            raise ValueError("stop patience must be >= drop patience")
        if not self.factor > 1:
            raise ValueError("drop factor must exceed 1")

    @classmethod
    def for_mcae(cls):
        return cls("min", 5, 10)

    @classmethod
    def for_ssmlp(cls):
        return cls("max", 25, 50)

    def improved(self, metric):
        if self.best is None:
            return True
        if self.mode == "min":
            return metric <= self.best - self.min_delta
        return metric >= self.best + self.min_delta

    def update(self, metric):
        return plateau_update(self, metric)


def plateau_update(schedule, epoch_metric):
    """Record one epoch's metric and return ``continue``, ``drop_lr`` or ``stop``."""
    if not math.isfinite(epoch_metric):
        raise ValueError(f"plateau metric must be finite, got {epoch_metric}")
    if schedule.improved(epoch_metric):
        schedule.best = float(epoch_metric)
        schedule.streak = 0
        return CONTINUE
    schedule.streak += 1
    if schedule.streak >= schedule.stop_patience:
        return STOP
    if schedule.streak == schedule.drop_patience:
        return DROP_LR
    return CONTINUE
