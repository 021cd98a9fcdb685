"""Sensor descriptions, Gaussian band resampling, standardisation and band exclusion."""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
SUPPORT_FWHM = 2.0
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class SensorSpec:
    centers: tuple
    fwhm: tuple
    name: str = "sensor"

    def __post_init__(self):
        centers = tuple(float(c) for c in self.centers)
        fwhm = tuple(float(f) for f in self.fwhm)
        if len(centers) != len(fwhm):
            raise ValueError(f"{len(centers)} band centers but {len(fwhm)} FWHMs")
        if any(b <= a for a, b in zip(centers, centers[1:])):
            raise ValueError("band centers must be strictly increasing")
        if any(not f > 0 for f in fwhm):
            raise ValueError("FWHMs must be positive")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "fwhm", fwhm)

    @property
    def bands(self):
        return len(self.centers)

    @classmethod
    def uniform(cls, start, stop, bands, fwhm_factor=1.0, name="sensor"):
        """Evenly spaced bands with FWHM equal to ``fwhm_factor`` times the spacing."""
        centers = np.linspace(start, stop, bands)
        step = (stop - start) / max(bands - 1, 1)
        return cls(tuple(centers), tuple([step * fwhm_factor] * bands), name)


@dataclass
class HsiCube:
    values: np.ndarray
    spec: SensorSpec
    gsd_m: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"cube values must be (H, W, B), got {self.values.shape}")
        if self.values.shape[2] != self.spec.bands:
            raise ValueError(
                f"cube has {self.values.shape[2]} bands but sensor {self.spec.name!r} "
                f"describes {self.spec.bands}")

    @property
    def shape(self):
        return self.values.shape


def resample_weights(source, target, source_mask=None):
    """``(target.bands, source.bands)`` matrix of normalised Gaussian weights.

    ``source_mask`` (boolean, per source band) zeroes weights of bands that
    must not contribute.
    """
    src = np.asarray(source.centers)
    usable = np.ones(src.size, bool) if source_mask is None else np.asarray(source_mask, bool)
    if usable.all() and source.centers == target.centers and source.fwhm == target.fwhm:
        # same sensor: neighbouring bands would otherwise bleed in through the Gaussian tails
        return np.eye(src.size)
    weights = np.zeros((target.bands, src.size))
    for t, (center, fwhm) in enumerate(zip(target.centers, target.fwhm)):
        sigma = fwhm * FWHM_TO_SIGMA
        inside = (np.abs(src - center) <= SUPPORT_FWHM * fwhm) & usable
        if not inside.any():
            raise ValueError(
                f"target band {t} ({center:g} nm, FWHM {fwhm:g}) overlaps no source band")
        g = np.where(inside, np.exp(-0.5 * ((src - center) / sigma) ** 2), 0.0)
        weights[t] = g / g.sum()
    return weights


def resample_bands(cube, target, source_mask=None):
    """Resample every pixel of ``cube`` onto the bands of ``target``."""
    w = resample_weights(cube.spec, target, source_mask)
    values = np.tensordot(cube.values.astype(np.float64), w.T, axes=([2], [0]))
    return HsiCube(values.astype(cube.values.dtype), target, cube.gsd_m, dict(cube.meta))


def exclude_bands(cube, band_indices):
    """Drop the listed bands (e.g. low-SNR or absorption bands) from values and sensor."""
    idx = [int(i) for i in band_indices]
    if len(set(idx)) != len(idx):
        raise ValueError(f"duplicate band indices in {idx}")
    bad = [i for i in idx if not 0 <= i < cube.spec.bands]
    if bad:
        raise ValueError(f"band indices {bad} out of range for {cube.spec.bands} bands")
    keep = np.setdiff1d(np.arange(cube.spec.bands), idx)
    spec = SensorSpec(tuple(np.asarray(cube.spec.centers)[keep]),
                      tuple(np.asarray(cube.spec.fwhm)[keep]), cube.spec.name)
    return HsiCube(cube.values[..., keep], spec, cube.gsd_m, dict(cube.meta))


@dataclass(frozen=True)
class Standardization:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, data):
        if data.shape[-1] != self.mean.size:
            raise ValueError(f"statistics for {self.mean.size} features, data has {data.shape[-1]}")
        constant = self.std < STD_FLOOR
        out = (data - self.mean) / np.where(constant, 1.0, self.std)
        out = np.where(constant, 0.0, out)
        return out.astype(data.dtype, copy=False)

    def to_dict(self):
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], np.float64), np.asarray(d["std"], np.float64))


def feature_stats(data, mask=None):
    """Per-feature mean and standard deviation over every other axis.

    ``mask`` (shaped like ``data`` without its last axis) restricts which
    samples contribute, e.g. training pixels only.
    """
    flat = np.asarray(data, np.float64).reshape(-1, data.shape[-1])
    if mask is not None:
        flat = flat[np.asarray(mask, bool).reshape(-1)]
    if flat.shape[0] < 2:
        raise ValueError("standardisation needs at least two samples per feature")
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    constant = int(np.sum(std < STD_FLOOR))
    if constant:
        log.warning("%d constant feature(s) map to zero after standardisation", constant)
    return Standardization(mean, std)


def standardize(data, stats=None, mask=None):
    """Zero-mean, unit-variance per feature. Returns ``(standardized, stats)``."""
    if stats is None:
        stats = feature_stats(data, mask)
    return stats.apply(data), stats
