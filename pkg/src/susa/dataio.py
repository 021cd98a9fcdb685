"""File formats, patch sampling, synthetic scenes and low-shot splits.

Rasters are a raw little-endian payload plus a ``<path>.hdr`` text sidecar of
``key = value`` lines. Cubes are 32-bit floats, band-interleaved-by-pixel;
label maps are unsigned 16-bit. Checkpoints are a single file: one line
``susa-checkpoint 1 <manifest bytes>``, a JSON manifest, then the raw
parameter payloads in manifest order.
"""
import fcntl
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .spectral import HsiCube, SensorSpec

log = logging.getLogger(__name__)

F32 = np.dtype("<f4")
U16 = np.dtype("<u2")
HEADER_MAGIC = "susa-raster 1"
CHECKPOINT_MAGIC = "susa-checkpoint 1"


# -- low-level writing -------------------------------------------------------

def write_bytes(path, chunks):
    """Write ``chunks`` to ``path`` under an exclusive lock."""
    fd = os.open(path, os.O_WRONLY | os.O_CREAT, 0o644)
    try:
        fcntl.flock(fd, fcntl.LOCK_EX)
        os.ftruncate(fd, 0)
        with os.fdopen(os.dup(fd), "wb") as fh:
            for chunk in chunks:
                fh.write(chunk)
    finally:
        fcntl.flock(fd, fcntl.LOCK_UN)
        os.close(fd)


def _fmt(value):
    if isinstance(value, (list, tuple)):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_header(path, fields):
    lines = [HEADER_MAGIC] + [f"{k} = {_fmt(v)}" for k, v in fields.items()]
    write_bytes(str(path) + ".hdr", ["\n".join(lines).encode() + b"\n"])


def read_header(path):
    hdr = Path(str(path) + ".hdr")
    if not hdr.exists():
        raise FileNotFoundError(f"missing sidecar header {hdr}")
    lines = hdr.read_text().splitlines()
    if not lines or lines[0].strip() != HEADER_MAGIC:
        raise ValueError(f"{hdr} is not a raster header")
    fields = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    return fields


def _floats(text):
    return [float(v) for v in text.split(",")] if text else []


def _read_payload(path, dtype, shape):
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = os.path.getsize(path)
    if actual != expected:
        raise ValueError(f"{path}: header implies {expected} bytes of payload, file holds {actual}")
    return np.fromfile(path, dtype=dtype).reshape(shape)


# -- cubes, tensors and label maps ------------------------------------------

def payload_bytes(height, width, bands):
    return height * width * bands * F32.itemsize


def save_cube(path, cube):
    h, w, b = cube.values.shape
    write_header(path, {
        "kind": "cube", "height": h, "width": w, "bands": b,
        "band_centers_nm": list(cube.spec.centers), "fwhm_nm": list(cube.spec.fwhm),
        "sensor": cube.spec.name, "gsd_m": float(cube.gsd_m), "dtype": "f32le", "interleave": "bip",
    })
    write_bytes(path, [np.ascontiguousarray(cube.values, dtype=F32).tobytes()])


def load_cube(path):
    f = read_header(path)
    if f.get("kind", "cube") != "cube" or f.get("dtype") != "f32le" or f.get("interleave") != "bip":
        raise ValueError(f"{path}: not an f32le BIP cube")
    shape = (int(f["height"]), int(f["width"]), int(f["bands"]))
    spec = SensorSpec(tuple(_floats(f["band_centers_nm"])), tuple(_floats(f["fwhm_nm"])), f.get("sensor", ""))
    values = _read_payload(path, F32, shape)
    return HsiCube(values, spec, float(f.get("gsd_m", 1.0)))


def save_tensor(path, array, meta=None):
    """Generic f32le array with its shape and a JSON metadata line."""
    array = np.ascontiguousarray(array, dtype=F32)
    write_header(path, {"kind": "tensor", "shape": list(array.shape), "dtype": "f32le",
                        "meta_json": json.dumps(meta or {}, sort_keys=True)})
    write_bytes(path, [array.tobytes()])


def load_tensor(path):
    f = read_header(path)
    if f.get("kind") != "tensor" or f.get("dtype") != "f32le":
        raise ValueError(f"{path}: not an f32le tensor")
    shape = tuple(int(v) for v in f["shape"].split(","))
    return _read_payload(path, F32, shape), json.loads(f.get("meta_json", "{}"))


@dataclass
class LabelMap:
    """``H x W`` class ids: 0 unlabeled, ``1..C`` classes."""

    values: np.ndarray
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError(f"label map must be 2-D, got {self.values.shape}")
        if not self.class_names:
            self.class_names = [f"class{c}" for c in range(1, int(self.values.max(initial=0)) + 1)]
        if self.values.min(initial=0) < 0 or self.values.max(initial=0) > len(self.class_names):
            raise ValueError(f"label ids exceed the {len(self.class_names)} named classes")

    @property
    def classes(self):
        return len(self.class_names)


def save_labels(path, labels):
    h, w = labels.values.shape
    write_header(path, {"kind": "labels", "height": h, "width": w, "classes": labels.classes,
                        "class_names_json": json.dumps(labels.class_names), "dtype": "u16le"})
    write_bytes(path, [np.ascontiguousarray(labels.values, dtype=U16).tobytes()])


def load_labels(path):
    f = read_header(path)
    if f.get("kind") != "labels" or f.get("dtype") != "u16le":
        raise ValueError(f"{path}: not a u16le label map")
    values = _read_payload(path, U16, (int(f["height"]), int(f["width"])))
    return LabelMap(values.astype(np.int64), json.loads(f["class_names_json"]))


def import_raw_cube(path, height, width, bands, spec, dtype="<f4", interleave="bip", gsd_m=1.0):
    """Read a header-less raw raster (BIP, BIL or BSQ) into an :class:`HsiCube`."""
    data = _read_payload(path, np.dtype(dtype), (height * width * bands,))
    if interleave == "bip":
        values = data.reshape(height, width, bands)
    elif interleave == "bil":
        values = data.reshape(height, bands, width).transpose(0, 2, 1)
    elif interleave == "bsq":
        values = data.reshape(bands, height, width).transpose(1, 2, 0)
    else:
        raise ValueError(f"unknown interleave {interleave!r}")
    return HsiCube(np.ascontiguousarray(values, np.float32), spec, gsd_m)


# -- checkpoints -------------------------------------------------------------

def _model_classes():
    from .mcae import McaeModel
    from .smcae import SmcaeStack
    from .ssmlp import SsmlpModel
    return {cls.kind: cls for cls in (McaeModel, SmcaeStack, SsmlpModel)}


def _named_parameters(model):
    if hasattr(model, "named_parameters"):
        return model.named_parameters()
    return list(model.params.items())


def save_checkpoint(path, model):
    entries, payloads, offset = [], [], 0
    for name, p in _named_parameters(model):
        raw = np.ascontiguousarray(p.value, dtype=F32).tobytes()
        entries.append({"name": name, "shape": list(p.value.shape), "kind": p.kind,
                        "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    manifest = json.dumps({"kind": model.kind, "model": model.to_manifest(), "parameters": entries,
                           "payload_bytes": offset, "dtype": "f32le"}, indent=1, sort_keys=True).encode()
    head = f"{CHECKPOINT_MAGIC} {len(manifest)}\n".encode()
    write_bytes(path, [head, manifest] + payloads)


def read_checkpoint_manifest(path):
    with open(path, "rb") as fh:
        line = fh.readline(256)
        if not line.startswith(CHECKPOINT_MAGIC.encode() + b" "):
            raise ValueError(f"{path} is not a checkpoint")
        head = line.decode("ascii", "replace").split()
        if len(head) != 3 or not head[2].isdigit():
            raise ValueError(f"{path} has a malformed checkpoint header")
        manifest = json.loads(fh.read(int(head[2])))
        start = fh.tell()
    return manifest, start


def load_checkpoint(path):
    manifest, start = read_checkpoint_manifest(path)
    classes = _model_classes()
    if manifest["kind"] not in classes:
        raise ValueError(f"unknown model kind {manifest['kind']!r}")
    model = classes[manifest["kind"]].from_manifest(manifest["model"])
    expected = dict(_named_parameters(model))
    entries = manifest["parameters"]
    if [e["name"] for e in entries] != list(expected):
        raise ValueError("checkpoint parameter list does not match the model layout")
    size = os.path.getsize(path) - start
    if size != manifest["payload_bytes"]:
        raise ValueError(f"checkpoint payload is {size} bytes, manifest says {manifest['payload_bytes']}")
    with open(path, "rb") as fh:
        fh.seek(start)
        blob = fh.read()
    offset = 0
    for e in entries:
        p = expected[e["name"]]
        shape = tuple(e["shape"])
        if shape != p.value.shape:
            raise ValueError(f"parameter {e['name']!r}: manifest shape {shape} but model needs {p.value.shape}")
        nbytes = int(np.prod(shape)) * F32.itemsize
        if e["offset"] != offset or e["nbytes"] != nbytes:
            raise ValueError(f"parameter {e['name']!r}: payload offset/size inconsistent with its shape")
        p.value = np.frombuffer(blob, F32, count=int(np.prod(shape)), offset=offset).reshape(shape).astype(np.float32)
        p.zero_grad()
        offset += nbytes
    return model


# -- patches -----------------------------------------------------------------

@dataclass
class PatchSet:
    patches: np.ndarray
    coords: np.ndarray
    n_train: int

    @property
    def train(self):
        return self.patches[:self.n_train]

    @property
    def val(self):
        return self.patches[self.n_train:]


def split_sizes(n, val_fraction=0.1):
    n_val = int(round(n * val_fraction))
    return n - n_val, n_val


def sample_patches(cubes, n, size=32, seed=0, val_fraction=0.1):
    """Uniformly placed ``size x size`` patches, cubes chosen in proportion to their area.

    Returns a :class:`PatchSet`; the first 90% are the training fold.
    ``coords`` rows are ``(cube index, row, col)`` of each top-left corner.
    """
    values = [c.values if isinstance(c, HsiCube) else np.asarray(c) for c in cubes]
    eligible = []
    for i, v in enumerate(values):
        if v.shape[0] < size or v.shape[1] < size:
            log.warning("cube %d (%dx%d) is smaller than the %d-pixel patch; skipped", i, v.shape[0], v.shape[1], size)
        else:
            eligible.append(i)
    if not eligible:
        raise ValueError("no cube is large enough for the requested patch size")
    bands = {values[i].shape[2] for i in eligible}
    if len(bands) != 1:
        raise ValueError(f"cubes disagree on band count: {sorted(bands)}")
    areas = np.array([values[i].shape[0] * values[i].shape[1] for i in eligible], float)
    rng = np.random.default_rng(seed)
    which = np.asarray(eligible)[rng.choice(len(eligible), n, p=areas / areas.sum())]
    coords = np.zeros((n, 3), np.int64)
    patches = np.empty((n, size, size, bands.pop()), np.float32)
    for k, ci in enumerate(which):
        v = values[ci]
        r = rng.integers(0, v.shape[0] - size + 1)
        c = rng.integers(0, v.shape[1] - size + 1)
        coords[k] = (ci, r, c)
        patches[k] = v[r:r + size, c:c + size]
    n_train, _ = split_sizes(n, val_fraction)
    return PatchSet(patches, coords, n_train)


# -- synthetic scenes ----------------------------------------------------------

@dataclass
class SyntheticSceneSpec:
    classes: int = 4
    bands: int = 32
    height: int = 64
    width: int = 64
    noise: float = 0.01
    variation: float = 0.05
    blob_scale: float = 6.0
    min_angle_deg: float = 5.0
    wavelength_range: tuple = (400.0, 1000.0)
    seed: int = 0

    def sensor(self, name="synthetic"):
        lo, hi = self.wavelength_range
        return SensorSpec.uniform(lo, hi, self.bands, 1.5, name)


def spectral_angle(a, b):
    cos = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


def smooth_curves(rng, count, bands, bumps=4):
    """Non-negative smooth spectra built from a few random Gaussian bumps."""
    grid = np.linspace(0.0, 1.0, bands)
    curves = np.full((count, bands), 0.1)
    for k in range(count):
        for _ in range(bumps):
            center, width, height = rng.uniform(-0.1, 1.1), rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.5)
            curves[k] += height * np.exp(-0.5 * ((grid - center) / width) ** 2)
    return curves


def _endmembers(spec, rng, attempts=1000):
    chosen = []
    for _ in range(attempts):
        cand = smooth_curves(rng, 1, spec.bands)[0]
        if all(spectral_angle(cand, e) >= spec.min_angle_deg for e in chosen):
            chosen.append(cand)
            if len(chosen) == spec.classes:
                return np.asarray(chosen)
    raise ValueError(f"could not draw {spec.classes} endmembers {spec.min_angle_deg} degrees apart")


def _class_regions(spec, rng, retries=5):
    scale = spec.blob_scale
    for _ in range(retries + 1):
        fields = rng.standard_normal((spec.classes, spec.height, spec.width))
        fields = np.stack([gaussian_filter(f, scale, mode="wrap") for f in fields])
        labels = np.argmax(fields, axis=0) + 1
        if np.unique(labels).size == spec.classes:
            return labels
        scale /= 2
    raise ValueError(f"could not place all {spec.classes} classes in a {spec.height}x{spec.width} scene")


def synth_scene(spec):
    """Blob-structured scene: class endmember scaled by a smooth illumination
    field, plus smooth per-pixel spectral variation and white noise.

    Returns ``(cube, label_map, endmembers)``.
    """
    if spec.classes < 2 or spec.bands < 4:
        raise ValueError("synthetic scenes need at least 2 classes and 4 bands")
    rng = np.random.default_rng(spec.seed)
    endmembers = _endmembers(spec, rng)
    labels = _class_regions(spec, rng)
    h, w, b = spec.height, spec.width, spec.bands
    base = endmembers[labels - 1]
    if spec.variation:
        illum = gaussian_filter(rng.standard_normal((h, w)), 2.0, mode="wrap")
        illum /= illum.std() or 1.0
        basis = smooth_curves(rng, 3, b) - 0.1
        mix = rng.standard_normal((h, w, 3))
        base = base * (1 + spec.variation * illum[..., None]) + spec.variation * (mix @ basis)
    if spec.noise:
        base = base + spec.noise * rng.standard_normal((h, w, b))
    cube = HsiCube(base.astype(np.float32), spec.sensor(), 1.0)
    names = [f"class{c}" for c in range(1, spec.classes + 1)]
    return cube, LabelMap(labels, names), endmembers


# -- low-shot splits -----------------------------------------------------------

@dataclass
class LowShotSplit:
    pixels: dict
    L: int
    seed: int
    shortfall: dict = field(default_factory=dict)

    def coords(self):
        """``(rows, cols, class ids)`` over all training pixels, class-major."""
        items = [(c, rc) for c in sorted(self.pixels) for rc in self.pixels[c]]
        if not items:
            return np.zeros(0, int), np.zeros(0, int), np.zeros(0, int)
        classes = np.array([c for c, _ in items])
        rc = np.array([rc for _, rc in items]).reshape(-1, 2)
        return rc[:, 0], rc[:, 1], classes

    def mask(self, shape):
        m = np.zeros(shape, bool)
        rows, cols, _ = self.coords()
        m[rows, cols] = True
        return m

    def to_dict(self):
        return {"L": self.L, "seed": self.seed,
                "pixels": {str(c): [list(map(int, rc)) for rc in v] for c, v in self.pixels.items()},
                "shortfall": {str(c): n for c, n in self.shortfall.items()}}

    @classmethod
    def from_dict(cls, d):
        return cls({int(c): [tuple(rc) for rc in v] for c, v in d["pixels"].items()}, d["L"], d["seed"],
                   {int(c): n for c, n in d.get("shortfall", {}).items()})


def lowshot_split(labels, L, seed, overrides=None):
    """Sample ``L`` (or a per-class override) labeled pixels per class without replacement."""
    if L < 1:
        raise ValueError("L must be at least 1")
    values = labels.values if isinstance(labels, LabelMap) else np.asarray(labels)
    classes = labels.classes if isinstance(labels, LabelMap) else int(values.max(initial=0))
    overrides = overrides or {}
    rng = np.random.default_rng(seed)
    pixels, shortfall = {}, {}
    for c in range(1, classes + 1):
        want = int(overrides.get(c, L))
        rows, cols = np.nonzero(values == c)
        take = min(want, rows.size)
        if take < want:
            shortfall[c] = want - take
            log.warning("class %d has %d labeled pixels, fewer than L=%d", c, rows.size, want)
        pick = np.sort(rng.choice(rows.size, take, replace=False)) if take else np.zeros(0, int)
        pixels[c] = [(int(rows[i]), int(cols[i])) for i in pick]
    return LowShotSplit(pixels, L, seed, shortfall)


def evaluation_mask(labels, split, inclusive=False):
    """Labeled pixels to score; training pixels are excluded unless ``inclusive``."""
    values = labels.values if isinstance(labels, LabelMap) else np.asarray(labels)
    mask = values > 0
    if not inclusive:
        mask &= ~split.mask(values.shape)
    return mask
