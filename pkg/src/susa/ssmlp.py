"""Semi-supervised multi-layer perceptron (SS-MLP).

The encoder maps pixel features through PELU layers to class logits. The
decoder starts from the softmax output and reconstructs every encoder level
back down to the input, so the reconstruction losses can be computed on
unlabeled pixels too.

Reconstruction levels, shallowest first: the input, each hidden layer, and
the class (softmax) layer.
"""
import copy
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .evaluation import metrics_from_labels
from .numerics import Node, Parameter, backward, ops
from .optim import DROP_LR, STOP, Nadam, PlateauSchedule, xavier_init
from .smcae import FeatureTensor
from .spectral import Standardization, feature_stats

log = logging.getLogger(__name__)

PREDICT_CHUNK = 65536


@dataclass
class SsmlpConfig:
    hidden_widths: tuple = (1600, 950, 250, 225)
    lambda_recon: tuple = (1.0, 1.0, 0.1, 0.1, 0.1, 0.1)
    activation: str = "pelu"
    learning_rate: float = 2e-3
    batch_size: int = 8
    weight_decay: float = 1e-3
    drop_patience: int = 25
    stop_patience: int = 50
    unlabeled_ratio: float = 1.0
    max_epochs: int = 1000
    decoder_noise: float = 0.0
    monitor: str = "oa"

    def __post_init__(self):
        self.hidden_widths = tuple(int(w) for w in self.hidden_widths)
        self.lambda_recon = tuple(float(v) for v in self.lambda_recon)
        if len(self.lambda_recon) != len(self.hidden_widths) + 2:
            raise ValueError(
                f"lambda_recon needs {len(self.hidden_widths) + 2} entries (input, "
                f"{len(self.hidden_widths)} hidden, class), got {len(self.lambda_recon)}")
        if min(self.hidden_widths, default=1) <= 0:
            raise ValueError("hidden widths must be positive")
        if self.activation not in ("pelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.monitor not in ("oa", "aa"):
            raise ValueError(f"monitor must be 'oa' or 'aa', got {self.monitor!r}")
        if self.unlabeled_ratio < 0:
            raise ValueError("unlabeled ratio must be non-negative")

    def to_dict(self):
        return asdict(self)


class SsmlpModel:
    kind = "ssmlp"

    def __init__(self, config, input_features, classes, params, stats=None):
        self.config = config
        self.input_features = int(input_features)
        self.classes = int(classes)
        self.params = params
        self.stats = stats

    @staticmethod
    def layout(config, input_features, classes):
        widths = (input_features,) + config.hidden_widths
        pelu = config.activation == "pelu"
        specs = []

        def layer(name, fin, fout, activation=True):
            specs.append((f"{name}.weight", (fin, fout), "weight"))
            specs.append((f"{name}.bias", (fout,), "bias"))
            if activation and pelu:
                specs.append((f"{name}.pelu_a", (), "pelu"))
                specs.append((f"{name}.pelu_b", (), "pelu"))

        for i in range(1, len(widths)):
            layer(f"enc{i}", widths[i - 1], widths[i])
        layer("cls", widths[-1], classes, activation=False)
        top = len(widths)
        layer(f"dec{top}", classes, classes)
        fin = classes
        for j in range(top - 1, 0, -1):
            layer(f"dec{j}", fin, widths[j])
            fin = widths[j]
        layer("dec0", fin, input_features, activation=False)
        return specs

    @property
    def depth(self):
        return len(self.config.hidden_widths)

    @property
    def dtype(self):
        return next(iter(self.params.values())).value.dtype

    def parameters(self):
        return list(self.params.values())

    def astype(self, dtype):
        for p in self.params.values():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        return self

    def copy(self):
        return copy.deepcopy(self)

    def state(self):
        return {name: p.value.copy() for name, p in self.params.items()}

    def load_state(self, state):
        for name, value in state.items():
            self.params[name].value = value.copy()

    def _layer(self, x, name, activation=True):
        h = ops.bias_add(ops.dense(x, self.params[f"{name}.weight"]), self.params[f"{name}.bias"])
        if not activation:
            return h
        if self.config.activation == "relu":
            return ops.relu(h)
        return ops.pelu(h, self.params[f"{name}.pelu_a"], self.params[f"{name}.pelu_b"])

    def _check_input(self, x):
        x = x if isinstance(x, Node) else Node(np.asarray(x, self.dtype))
        if x.value.ndim != 2 or x.value.shape[1] != self.input_features:
            raise ValueError(f"SS-MLP expects (N, {self.input_features}) input, got {x.value.shape}")
        return x

    def encode(self, x):
        x = self._check_input(x)
        acts = [x]
        h = x
        for i in range(1, self.depth + 1):
            h = self._layer(h, f"enc{i}")
            acts.append(h)
        return acts, self._layer(h, "cls", activation=False)

    def forward(self, x, noise_rng=None):
        """Logits, softmax, encoder levels and their decoder reconstructions.

        ``levels[j]`` and ``recon[j]`` line up for ``j = 0`` (input) to
        ``depth + 1`` (class layer).
        """
        acts, logits = self.encode(x)
        probs = ops.softmax(logits)
        z = probs
        if self.config.decoder_noise and noise_rng is not None:
            z = ops.add_noise(z, noise_rng.normal(0, self.config.decoder_noise, z.value.shape)
                              .astype(z.value.dtype))
        top = self.depth + 1
        recon = [None] * (top + 1)
        z = self._layer(z, f"dec{top}")
        recon[top] = z
        for j in range(top - 1, 0, -1):
            z = self._layer(z, f"dec{j}")
            recon[j] = z
        recon[0] = self._layer(z, "dec0", activation=False)
        levels = acts + [ops.stop_gradient(probs)]
        return {"logits": logits, "probs": probs, "levels": levels, "recon": recon}

    def predict_proba(self, x):
        out = []
        x = np.asarray(x, self.dtype)
        for start in range(0, len(x), PREDICT_CHUNK):
            _, logits = self.encode(x[start:start + PREDICT_CHUNK])
            out.append(ops.softmax(logits).value)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.classes), self.dtype)

    def to_manifest(self):
        return {"config": self.config.to_dict(), "input_features": self.input_features,
                "classes": self.classes,
                "stats": None if self.stats is None else self.stats.to_dict()}

    @classmethod
    def from_manifest(cls, manifest, dtype=np.float32):
        config = SsmlpConfig(**manifest["config"])
        f, c = manifest["input_features"], manifest["classes"]
        params = {name: Parameter(np.zeros(shape, dtype), name, kind)
                  for name, shape, kind in cls.layout(config, f, c)}
        stats = manifest.get("stats")
        return cls(config, f, c, params, None if stats is None else Standardization.from_dict(stats))


def build_ssmlp(config, input_features, classes, seed, dtype=np.float32):
    """Xavier weights; biases and PELU parameters start at one."""
    if input_features < 1:
        raise ValueError("need at least one input feature")
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in SsmlpModel.layout(config, input_features, classes):
        value = xavier_init(shape, rng, dtype) if kind == "weight" else np.ones(shape, dtype)
        params[name] = Parameter(value, name, kind)
    return SsmlpModel(config, input_features, classes, params)


def ssmlp_loss(outputs, labels, lambda_recon, class_target=None):
    """Cross-entropy on the labeled rows plus weighted reconstruction MSEs on all rows.

    ``labels`` covers the first ``len(labels)`` rows of the batch; the rest
    are unlabeled. The class-level target is the softmax output held
    constant; ``class_target`` pins it to a given array instead (gradient
    checks use this so perturbed evaluations see the same constant).
    Returns ``(total node, components dict)``.
    """
    labels = np.asarray([] if labels is None else labels, dtype=np.int64)
    if len(lambda_recon) != len(outputs["recon"]):
        raise ValueError(f"{len(lambda_recon)} weights for {len(outputs['recon'])} reconstruction levels")
    if labels.size == 0 and not any(lambda_recon):
        raise ValueError("unlabeled batch with all reconstruction weights zero has no objective")
    levels = list(outputs["levels"])
    if class_target is not None:
        levels[-1] = Node(np.asarray(class_target, levels[-1].value.dtype))
    recon_terms = [ops.mse(r, t) for r, t in zip(outputs["recon"], levels)]
    recon_total = ops.weighted_sum(recon_terms, lambda_recon)
    components = {"recon": [t.item() for t in recon_terms], "recon_weighted": recon_total.item()}
    if labels.size:
        logits = outputs["logits"]
        if labels.size < logits.value.shape[0]:
            logits = ops.take_rows(logits, np.arange(labels.size))
        class_loss = ops.softmax_cross_entropy(logits, labels)
        components["class"] = class_loss.item()
        total = ops.weighted_sum([class_loss, recon_total], [1.0, 1.0]) if any(lambda_recon) else class_loss
    else:
        components["class"] = None
        total = recon_total
    components["total"] = total.item()
    return total, components


def stratified_split(labels, rng, fraction=0.1):
    """Per-class validation draw: ``ceil(fraction * n_c)`` of each class with at least two samples."""
    labels = np.asarray(labels)
    train, val = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_val = math.ceil(fraction * idx.size) if idx.size >= 2 else 0
        val.extend(idx[:n_val])
        train.extend(idx[n_val:])
    return np.sort(np.asarray(train, int)), np.sort(np.asarray(val, int))


def _accuracy(model, x, y):
    pred = np.argmax(model.predict_proba(x), axis=1)
    m = metrics_from_labels(y + 1, pred + 1, model.classes)
    return m["OA"], m["AA"]


def train_ssmlp(model, features, labels, unlabeled=None, seed=0, max_epochs=None, split=None):
    """Low-shot training with the joint classification + reconstruction objective.

    ``labels`` are class indices ``0..C-1``. Each mini-batch of labeled
    samples is joined by ``unlabeled_ratio`` times as many pixels drawn from
    ``unlabeled``. A stratified 90/10 split (or the ``(train, val)`` index
    pair in ``split``) provides the validation accuracy that drives the
    plateau schedule. Returns the history dict.
    """
    cfg = model.config
    x = np.asarray(features, model.dtype)
    y = np.asarray(labels, np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError(f"features {x.shape} and labels {y.shape} do not line up")
    pool = None
    if unlabeled is not None and len(unlabeled) and cfg.unlabeled_ratio > 0:
        pool = np.asarray(unlabeled, model.dtype)
    rng = np.random.default_rng(seed)
    pool_rng = np.random.default_rng([seed, 1])
    noise_rng = np.random.default_rng([seed, 2]) if cfg.decoder_noise else None
    train_idx, val_idx = split if split is not None else stratified_split(y, rng)
    history = {"step_loss": [], "train_loss": [], "class_loss": [], "recon_loss": [],
               "val_oa": [], "val_aa": [], "lr": [], "steps": 0, "notes": [],
               "stopped": "max_epochs", "train_size": int(len(train_idx)), "val_size": int(len(val_idx))}
    missing = sorted(set(range(model.classes)) - set(y[train_idx].tolist()))
    if missing:
        log.warning("classes %s absent from the training fold", missing)
        history["notes"].append(f"classes absent from training fold: {missing}")
    if not len(val_idx):
        history["notes"].append("empty validation fold; monitoring training accuracy")
    monitor_x, monitor_y = (x[val_idx], y[val_idx]) if len(val_idx) else (x[train_idx], y[train_idx])

    optimizer = Nadam(lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    schedule = PlateauSchedule("max", cfg.drop_patience, cfg.stop_patience)
    params = model.parameters()
    max_epochs = cfg.max_epochs if max_epochs is None else max_epochs
    for epoch in range(max_epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        losses, class_losses, recon_losses = [], [], []
        for start in range(0, len(order), cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            batch = x[rows]
            if pool is not None:
                n_unl = min(len(pool), int(round(cfg.unlabeled_ratio * len(rows))))
                batch = np.concatenate([batch, pool[pool_rng.choice(len(pool), n_unl, replace=False)]])
            for p in params:
                p.zero_grad()
            total, comp = ssmlp_loss(model.forward(batch, noise_rng), y[rows], cfg.lambda_recon)
            if not math.isfinite(comp["total"]):
                raise FloatingPointError(f"non-finite SS-MLP loss at epoch {epoch}")
            backward(total)
            optimizer.step(params)
            history["step_loss"].append(comp["total"])
            history["steps"] += 1
            losses.append(comp["total"])
            class_losses.append(comp["class"])
            recon_losses.append(comp["recon_weighted"])
        oa, aa = _accuracy(model, monitor_x, monitor_y)
        history["train_loss"].append(float(np.mean(losses)))
        history["class_loss"].append(float(np.mean(class_losses)))
        history["recon_loss"].append(float(np.mean(recon_losses)))
        history["val_oa"].append(oa)
        history["val_aa"].append(aa)
        history["lr"].append(optimizer.lr)
        action = schedule.update(oa if cfg.monitor == "oa" else aa)
        if action == DROP_LR:
            optimizer.lr /= schedule.factor
        elif action == STOP:
            history["stopped"] = "plateau"
            break
    history["epochs"] = len(history["train_loss"])
    return history


def train_lowshot(config, features, split, classes, seed, unlabeled=None, max_epochs=None,
                  stats_from="image"):
    """Standardise an ``(H, W, F)`` feature map and train an SS-MLP on a low-shot split.

    Statistics come from every pixel of the map (``stats_from="image"``) or
    from the training pixels only (``"train"``) and are stored on the model.
    The labeled pixels of ``split`` get a stratified 90/10 train/validation
    draw; the unlabeled pool is every pixel except the validation ones,
    optionally subsampled to ``unlabeled`` pixels. Returns ``(model, history)``.
    """
    if stats_from not in ("image", "train"):
        raise ValueError(f"stats_from must be 'image' or 'train', got {stats_from!r}")
    values = features.values if isinstance(features, FeatureTensor) else np.asarray(features)
    if values.ndim != 3:
        raise ValueError(f"expected (H, W, F) features, got {values.shape}")
    h, w, f = values.shape
    rows, cols, ids = split.coords()
    if not len(ids):
        raise ValueError("the split holds no labeled pixels")
    labeled = rows * w + cols
    rng = np.random.default_rng([seed, 3])
    train_idx, val_idx = stratified_split(ids - 1, rng)
    mask = None
    if stats_from == "train":
        mask = np.zeros(h * w, bool)
        mask[labeled[train_idx]] = True
    stats = feature_stats(values.reshape(-1, f), mask)
    x = stats.apply(values.reshape(-1, f).astype(np.float32))
    pool = None
    if config.unlabeled_ratio > 0 and any(config.lambda_recon) and unlabeled != 0:
        pool_idx = np.setdiff1d(np.arange(h * w), labeled[val_idx])
        if unlabeled is not None and unlabeled < len(pool_idx):
            pool_idx = np.sort(rng.choice(pool_idx, int(unlabeled), replace=False))
        pool = x[pool_idx]
    model = build_ssmlp(config, f, classes, seed)
    model.stats = stats
    history = train_ssmlp(model, x[labeled], ids - 1, pool, seed=seed, max_epochs=max_epochs,
                          split=(train_idx, val_idx))
    history["unlabeled_pool"] = 0 if pool is None else int(len(pool))
    return model, history


def predict_map(model, features, stats=None):
    """Per-pixel class ids ``1..C`` and softmax probabilities for an ``(H, W, F)`` map.

    Features are standardised with ``stats`` (default: the statistics stored
    on the model at training time). Ties go to the lowest class id.
    """
    values = features.values if isinstance(features, FeatureTensor) else np.asarray(features)
    if values.ndim != 3:
        raise ValueError(f"expected (H, W, F) features, got {values.shape}")
    h, w, f = values.shape
    if f != model.input_features:
        raise ValueError(f"model expects {model.input_features} features, got {f}")
    stats = stats if stats is not None else model.stats
    flat = values.reshape(-1, f)
    if stats is not None:
        flat = stats.apply(flat)
    probs = model.predict_proba(flat)
    labels = np.argmax(probs, axis=1).astype(np.int64) + 1
    return labels.reshape(h, w), probs.reshape(h, w, model.classes)
