"""Multi-loss convolutional autoencoder (MCAE).

Encoder: ``M`` blocks of 3x3 conv -> activation, with 2x2 max pooling after
every block but the last (the bottleneck). Convolutions replicate border
pixels rather than padding with zeros. Decoder: ``M - 1`` refinement
blocks, each a nearest x2 upsample, concatenation with the matching encoder
activation, 3x3 conv and activation; then a linear 3x3 conv back to the input
bands.

Reconstruction pairs, shallowest first: the input against the output head,
then encoder activation ``i`` against the refinement block that restores its
resolution. The training objective is their weighted MSE sum.
"""
import copy
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import Node, Parameter, backward, ops
from .optim import DROP_LR, STOP, Nadam, PlateauSchedule, xavier_init

log = logging.getLogger(__name__)

# replicated borders: a spatially constant input stays constant through every layer
CONV_PADDING = "edge"


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; the model keeps its last good weights."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class McaeConfig:
    encoder_widths: tuple = (256, 512, 512, 1024)
    refinement_widths: tuple = (512, 512, 256)
    loss_weights: tuple = (1.0, 1e-1, 1e-2, 1e-2)
    activation: str = "pelu"
    learning_rate: float = 2e-3
    batch_size: int = 512
    width_scale: float = 1.0
    kernel_size: int = 3
    weight_decay: float = 0.0
    max_epochs: int = 500
    drop_patience: int = 5
    stop_patience: int = 10

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.refinement_widths = tuple(int(w) for w in self.refinement_widths)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        depth = len(self.encoder_widths)
        if len(self.loss_weights) != depth:
            raise ValueError(f"{len(self.loss_weights)} loss weights for {depth} encoder blocks")
        if len(self.refinement_widths) != depth - 1:
            raise ValueError(f"{depth} encoder blocks need {depth - 1} refinement blocks")
        if min(self.encoder_widths + self.refinement_widths) <= 0 or self.width_scale <= 0:
            raise ValueError("widths and width scale must be positive")
        mirrored = tuple(reversed(self.encoder_widths[:-1]))
        if self.refinement_widths != mirrored:
            # each refinement block reconstructs the encoder activation at its resolution
            raise ValueError(f"refinement widths {self.refinement_widths} must mirror encoder "
                             f"widths, i.e. {mirrored}")
        if self.activation not in ("pelu", "relu"):
            raise ValueError(f"activation must be 'pelu' or 'relu', got {self.activation!r}")

    @classmethod
    def cae(cls, **kw):
        """Single-loss, ReLU configuration of the earlier convolutional autoencoder."""
        return cls(loss_weights=(1.0, 0.0, 0.0, 0.0), activation="relu", **kw)

    @property
    def depth(self):
        return len(self.encoder_widths)

    def scaled(self, widths):
        return tuple(max(1, int(round(w * self.width_scale))) for w in widths)

    @property
    def feature_width(self):
        return self.scaled(self.refinement_widths)[-1]

    def to_dict(self):
        return asdict(self)


class McaeModel:
    kind = "mcae"

    def __init__(self, config, input_bands, params):
        self.config = config
        self.input_bands = int(input_bands)
        self.params = params

    # -- construction ------------------------------------------------------

    @staticmethod
    def layout(config, input_bands):
        """Ordered ``(name, shape, kind)`` for every parameter."""
        k = config.kernel_size
        enc = config.scaled(config.encoder_widths)
        ref = config.scaled(config.refinement_widths)
        specs = []

        def block(name, cin, cout, activation=True):
            specs.append((f"{name}.weight", (k, k, cin, cout), "weight"))
            specs.append((f"{name}.bias", (cout,), "bias"))
            if activation and config.activation == "pelu":
                specs.append((f"{name}.pelu_a", (), "pelu"))
                specs.append((f"{name}.pelu_b", (), "pelu"))

        cin = input_bands
        for i, width in enumerate(enc, 1):
            block(f"enc{i}", cin, width)
            cin = width
        for j, width in enumerate(ref, 1):
            skip = enc[config.depth - 1 - j]
            block(f"ref{j}", cin + skip, width)
            cin = width
        block("head", cin, input_bands, activation=False)
        return specs

    @property
    def dtype(self):
        return next(iter(self.params.values())).value.dtype

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return sum(p.value.size for p in self.params.values())

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

    # -- forward -----------------------------------------------------------

    def _activate(self, h, name):
        if self.config.activation == "relu":
            return ops.relu(h)
        return ops.pelu(h, self.params[f"{name}.pelu_a"], self.params[f"{name}.pelu_b"])

    def _block(self, x, name, activation=True):
        h = ops.bias_add(ops.conv2d(x, self.params[f"{name}.weight"], CONV_PADDING),
                         self.params[f"{name}.bias"])
        return self._activate(h, name) if activation else h

    def forward(self, batch):
        """Run the autoencoder on ``(N, H, W, B)`` data.

        Returns a dict with ``pairs`` (target, reconstruction) per loss layer,
        the ``bottleneck`` activation and the ``features`` response (last
        refinement activation, full resolution).
        """
        x = batch if isinstance(batch, Node) else Node(np.asarray(batch, self.dtype))
        if x.value.ndim != 4:
            raise ValueError(f"MCAE expects (N, H, W, B) input, got {x.value.shape}")
        if x.value.shape[3] != self.input_bands:
            raise ValueError(f"MCAE built for {self.input_bands} bands, input has {x.value.shape[3]}")
        depth = self.config.depth
        multiple = 2 ** (depth - 1)
        if x.value.shape[1] % multiple or x.value.shape[2] % multiple:
            raise ValueError(f"spatial dims {x.value.shape[1:3]} not divisible by {multiple}")

        acts = []
        h = x
        for i in range(1, depth + 1):
            h = self._block(h, f"enc{i}")
            acts.append(h)
            if i < depth:
                h = ops.pool2d(h, "max", 2, 2, "valid")
        d = acts[-1]
        refined = []
        for j in range(1, depth):
            skip = acts[depth - 1 - j]
            d = self._block(ops.concat([ops.upsample_nearest2d(d, 2), skip]), f"ref{j}")
            refined.append(d)
        out = self._block(d, "head", activation=False)
        pairs = [(x, out)] + [(acts[i], refined[depth - 2 - i]) for i in range(depth - 1)]
        return {"pairs": pairs, "bottleneck": acts[-1], "features": d, "output": out}

    def loss(self, batch):
        out = self.forward(batch)
        total, per_layer = mcae_loss(out["pairs"], self.config.loss_weights)
        return total, per_layer

    def to_manifest(self):
        return {"config": self.config.to_dict(), "input_bands": self.input_bands}

    @classmethod
    def from_manifest(cls, manifest, dtype=np.float32):
        config = McaeConfig(**manifest["config"])
        bands = manifest["input_bands"]
        params = {name: Parameter(np.zeros(shape, dtype), name, kind)
                  for name, shape, kind in cls.layout(config, bands)}
        return cls(config, bands, params)


def build_mcae(config, input_bands, seed, dtype=np.float32):
    """Xavier weights; biases and PELU parameters start at one."""
    if input_bands < 1:
        raise ValueError("need at least one input band")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in McaeModel.layout(config, input_bands):
        if kind == "weight":
            value = xavier_init(shape, rng, dtype)
        else:
            value = np.ones(shape, dtype)
        params[name] = Parameter(value, name, kind)
    return McaeModel(config, input_bands, params)


def mcae_loss(pairs, weights):
    """Weighted sum of per-layer MSEs. Returns ``(total node, [per-layer floats])``."""
    if len(pairs) != len(weights):
        raise ValueError(f"{len(pairs)} reconstruction pairs but {len(weights)} loss weights")
    terms = [ops.mse(recon, target) for target, recon in pairs]
    return ops.weighted_sum(terms, weights), [t.item() for t in terms]


def evaluate_mcae(model, patches, batch_size=None):
    """Mean objective and mean per-layer MSEs over ``patches`` (no gradients)."""
    batch_size = batch_size or model.config.batch_size
    totals, layers, counts = [], [], []
    for start in range(0, len(patches), batch_size):
        chunk = patches[start:start + batch_size]
        total, per_layer = model.loss(chunk)
        totals.append(total.item())
        layers.append(per_layer)
        counts.append(len(chunk))
    w = np.asarray(counts, float) / sum(counts)
    return float(np.dot(w, totals)), list(np.asarray(layers).T @ w)


def train_mcae(model, patches, val_patches=None, seed=0, max_steps=None, max_epochs=None,
               batch_size=None, learning_rate=None, schedule=None):
    """Mini-batch Nadam on the multi-loss objective.

    One epoch is one shuffled pass over ``patches``. The learning rate drops
    tenfold when the validation loss stalls for ``drop_patience`` epochs and
    training stops after ``stop_patience``. Without validation patches the
    training loss drives the schedule. Returns the per-epoch history.
    """
    cfg = model.config
    batch_size = batch_size or cfg.batch_size
    max_epochs = max_epochs if max_epochs is not None else cfg.max_epochs
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    schedule = schedule or PlateauSchedule("min", cfg.drop_patience, cfg.stop_patience)
    optimizer = Nadam(lr=lr, weight_decay=cfg.weight_decay)
    patches = np.asarray(patches, model.dtype)
    rng = np.random.default_rng(seed)
    history = {"train_loss": [], "val_loss": [], "lr": [], "per_layer": [], "steps": 0,
               "stopped": "max_epochs"}
    last_good = model.state()
    params = model.parameters()

    for epoch in range(max_epochs):
        order = rng.permutation(len(patches))
        batch_losses = []
        for start in range(0, len(order), batch_size):
            batch = patches[order[start:start + batch_size]]
            for p in params:
                p.zero_grad()
            total, _ = model.loss(batch)
            value = total.item()
            if not math.isfinite(value):
                model.load_state(last_good)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {history['steps']}",
                                       history)
            backward(total)
            optimizer.step(params)
            batch_losses.append(value)
            history["steps"] += 1
            if max_steps is not None and history["steps"] >= max_steps:
                break
        history["train_loss"].append(float(np.mean(batch_losses)))
        history["lr"].append(optimizer.lr)
        if val_patches is not None and len(val_patches):
            val_loss, per_layer = evaluate_mcae(model, np.asarray(val_patches, model.dtype), batch_size)
        else:
            val_loss, per_layer = history["train_loss"][-1], []
        history["val_loss"].append(val_loss)
        history["per_layer"].append(per_layer)
        if not math.isfinite(val_loss):
            model.load_state(last_good)
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", history)
        last_good = model.state()
        log.info("epoch:%d train_loss:%.6g val_loss:%.6g lr:%g", epoch, history["train_loss"][-1],
                 val_loss, optimizer.lr)
        if max_steps is not None and history["steps"] >= max_steps:
            history["stopped"] = "max_steps"
            break
        action = schedule.update(val_loss)
        if action == DROP_LR:
            optimizer.lr /= schedule.factor
        elif action == STOP:
            history["stopped"] = "plateau"
            break
    return history


def pad_to_multiple(image, multiple):
    """Reflect-pad ``(H, W, C)`` up to the next multiple; returns padded image and original size."""
    h, w = image.shape[:2]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        mode = "reflect" if h > ph and w > pw else "symmetric"
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode=mode)
    return image, (h, w)


def extract_mcae_features(model, image):
    """Full-resolution feature response of an ``(H, W, F)`` image."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"expected an (H, W, F) image, got {image.shape}")
    if image.shape[2] != model.input_bands:
        raise ValueError(f"model expects {model.input_bands} channels, image has {image.shape[2]}")
    padded, (h, w) = pad_to_multiple(image.astype(model.dtype), 2 ** (model.config.depth - 1))
    features = model.forward(padded[None])["features"].value[0]
    return features[:h, :w].copy()
