"""Stacks of MCAEs: sequential training, feature extraction and sensor fusion."""
import logging
from dataclasses import dataclass, field

import numpy as np

from .mcae import McaeModel, build_mcae, extract_mcae_features, train_mcae
from .numerics import kernels
from .spectral import SensorSpec, Standardization, feature_stats, resample_bands

log = logging.getLogger(__name__)

POOL_WINDOW = 5


@dataclass
class FeatureTensor:
    """``(H, W, F)`` feature response with provenance metadata."""

    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"feature tensor must be (H, W, F), got {self.values.shape}")

    @property
    def shape(self):
        return self.values.shape

    @property
    def channels(self):
        return self.values.shape[2]


@dataclass
class SmcaeStack:
    models: list
    sensor: SensorSpec = None
    stage_stats: list = field(default_factory=list)
    kind = "smcae"

    def __post_init__(self):
        for k in range(1, len(self.models)):
            prev, cur = self.models[k - 1], self.models[k]
            if cur.input_bands != prev.config.feature_width:
                raise ValueError(
                    f"stage {k} expects {cur.input_bands} channels but stage {k - 1} "
                    f"produces {prev.config.feature_width}")
        if self.models and self.sensor is not None and self.models[0].input_bands != self.sensor.bands:
            raise ValueError("first stage input does not match the sensor band count")

    @property
    def depth(self):
        return len(self.models)

    @property
    def output_channels(self):
        return sum(m.config.feature_width for m in self.models)

    def parameters(self):
        return [p for m in self.models for p in m.parameters()]

    def named_parameters(self):
        return [(f"stage{k}/{name}", p) for k, m in enumerate(self.models)
                for name, p in m.params.items()]

    def to_manifest(self):
        return {
            "stages": [m.to_manifest() for m in self.models],
            "sensor": None if self.sensor is None else {
                "name": self.sensor.name, "centers": list(self.sensor.centers),
                "fwhm": list(self.sensor.fwhm)},
            "stage_stats": [s.to_dict() for s in self.stage_stats],
        }

    @classmethod
    def from_manifest(cls, manifest, dtype=np.float32):
        models = [McaeModel.from_manifest(m, dtype) for m in manifest["stages"]]
        s = manifest.get("sensor")
        sensor = None if s is None else SensorSpec(tuple(s["centers"]), tuple(s["fwhm"]), s["name"])
        stats = [Standardization.from_dict(d) for d in manifest.get("stage_stats", [])]
        return cls(models, sensor, stats)


class StackTrainingError(RuntimeError):
    def __init__(self, message, stack, stage, histories):
        super().__init__(message)
        self.stack = stack
        self.stage = stage
        self.histories = histories


def _stage_features(model, data, batch_size):
    chunks = [model.forward(data[i:i + batch_size])["features"].value
              for i in range(0, len(data), batch_size)]
    return np.concatenate(chunks, axis=0)


def train_smcae_stack(patches, stages, config, seed, val_patches=None, sensor=None, **train_kw):
    """Train ``stages`` MCAEs in succession.

    Stage 1 sees the band-standardised patches; stage ``k`` sees the
    standardised feature response of stage ``k - 1`` on the same patches.
    Extra keyword arguments go to :func:`train_mcae`. Returns
    ``(stack, histories)``.
    """
    if stages < 1:
        raise ValueError("a stack needs at least one stage")
    patches = np.asarray(patches, np.float32)
    if patches.ndim != 4:
        raise ValueError(f"patches must be (N, H, W, B), got {patches.shape}")
    batch_size = train_kw.get("batch_size") or config.batch_size
    stats = feature_stats(patches)
    data = stats.apply(patches)
    val = None if val_patches is None or not len(val_patches) else stats.apply(
        np.asarray(val_patches, np.float32))
    stack = SmcaeStack([], sensor, [stats])
    histories = []
    for k in range(stages):
        model = build_mcae(config, data.shape[3], seed=[seed, k])
        try:
            history = train_mcae(model, data, val, seed=[seed, k], **train_kw)
        except Exception as exc:
            raise StackTrainingError(f"stage {k} failed: {exc}", stack, k, histories) from exc
        histories.append(history)
        stack.models.append(model)
        log.info("stage:%d epochs:%d final_train_loss:%.6g", k, len(history["train_loss"]),
                 history["train_loss"][-1])
        if k + 1 < stages:
            feats = _stage_features(model, data, batch_size)
            stage_stats = feature_stats(feats)
            stack.stage_stats.append(stage_stats)
            data = stage_stats.apply(feats)
            if val is not None:
                val = stage_stats.apply(_stage_features(model, val, batch_size))
    return stack, histories


def mean_pool_features(values, window=POOL_WINDOW):
    """Stride-1, same-padded mean filter over an ``(H, W, F)`` map."""
    out, _ = kernels.pool2d_forward(values[None], "mean", window, 1, "same")
    return out[0]


def smcae_extract(stack, cube, resample=True, stats="image"):
    """Concatenated, standardised and 5x5 mean-pooled features of an HSI cube.

    ``stats="image"`` standardises with statistics of the image itself;
    ``stats="stored"`` reuses the statistics recorded during training.
    """
    if stats not in ("image", "stored"):
        raise ValueError(f"stats must be 'image' or 'stored', got {stats!r}")
    same_bands = stack.sensor is None or (
        cube.spec.centers == stack.sensor.centers and cube.spec.fwhm == stack.sensor.fwhm)
    if not same_bands:
        if not resample:
            raise ValueError(
                f"cube sensor {cube.spec.name!r} differs from stack sensor {stack.sensor.name!r} "
                "and resampling is disabled")
        cube = resample_bands(cube, stack.sensor)
    x = cube.values.astype(np.float32)
    if x.shape[2] != stack.models[0].input_bands:
        raise ValueError(f"stack expects {stack.models[0].input_bands} bands, cube has {x.shape[2]}")

    def standardize(data, k):
        s = stack.stage_stats[k] if stats == "stored" else feature_stats(data)
        return s.apply(data)

    x = standardize(x, 0)
    outputs = []
    for k, model in enumerate(stack.models):
        f = extract_mcae_features(model, x)
        if stats == "stored" and k + 1 < len(stack.stage_stats):
            f = stack.stage_stats[k + 1].apply(f)
        else:
            f = feature_stats(f).apply(f)
        outputs.append(f)
        x = f
    concatenated = np.concatenate(outputs, axis=2)
    concatenated = feature_stats(concatenated).apply(concatenated)
    pooled = mean_pool_features(concatenated).astype(np.float32)
    meta = {"stages": stack.depth, "sensor": None if stack.sensor is None else stack.sensor.name,
            "channels": int(pooled.shape[2])}
    return FeatureTensor(pooled, meta)


def fuse_sensor_features(responses, names=None):
    """Concatenate feature responses along the channel axis, in the given order."""
    if not responses:
        raise ValueError("nothing to fuse")
    shape = responses[0].values.shape[:2]
    for i, r in enumerate(responses):
        if r.values.shape[:2] != shape:
            raise ValueError(f"response {i} has spatial dims {r.values.shape[:2]}, expected {shape}")
    names = list(names) if names is not None else [
        r.meta.get("sensor") or f"input{i}" for i, r in enumerate(responses)]
    values = np.concatenate([r.values for r in responses], axis=2)
    meta = {"order": names, "channels": [int(r.channels) for r in responses]}
    return FeatureTensor(values, meta)
