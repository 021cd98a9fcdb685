"""Batch command-line front end: ``susa <command> [options]``.

Every command writes its outputs plus ``run_manifest.json`` (arguments,
seed, SHA-256 of every input and output) into ``--out-dir``. Outputs are
staged in a hidden directory and moved into place only on success. Errors
end the run with one ``status:error`` line on stderr and a nonzero exit.
"""
import argparse
import hashlib
import json
import logging
import os
import re
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .dataio import (LabelMap, LowShotSplit, SyntheticSceneSpec, evaluation_mask, load_checkpoint,
                     load_cube, load_labels, load_tensor, lowshot_split, sample_patches,
                     save_checkpoint, save_cube, save_labels, save_tensor, synth_scene)
from .evaluation import confusion, dissimilarity, metrics
from .gradsuite import CASES, TOLERANCE, run_gradient_suite
from .mcae import McaeConfig
from .smcae import FeatureTensor, SmcaeStack, fuse_sensor_features, smcae_extract, train_smcae_stack
from .spectral import SensorSpec
from .ssmlp import SsmlpConfig, SsmlpModel, predict_map, train_lowshot

log = logging.getLogger("susa.cli")

MANIFEST = "run_manifest.json"
REF = "reference setting"
_KEY = re.compile(r"^\w+:")


class KeyValueFormatter(logging.Formatter):
    """``level:INFO source:susa.mcae epoch:3 ...``; free-text messages become ``msg:"..."``."""

    def format(self, record):
        text = record.getMessage()
        if not _KEY.match(text):
            text = "msg:" + json.dumps(text)
        return f"level:{record.levelname} source:{record.name} {text}"


class RunError(Exception):
    pass


# -- hashing, staging and manifests --------------------------------------------

def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _with_sidecar(path):
    path = Path(path)
    sidecar = Path(str(path) + ".hdr")
    return [path, sidecar] if sidecar.exists() else [path]


def _require(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    return path


class Staging:
    """Collects outputs in a hidden directory inside ``out_dir`` and publishes them together."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.created = not self.out_dir.exists()
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.dir = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.out_dir))
        self.exit_status = 0

    def path(self, name):
        return str(self.dir / name)

    def files(self):
        return sorted(p.name for p in self.dir.iterdir())

    def commit(self):
        for name in self.files():
            os.replace(self.dir / name, self.out_dir / name)
        self.dir.rmdir()

    def abort(self):
        shutil.rmtree(self.dir, ignore_errors=True)
        if self.created and not any(self.out_dir.iterdir()):
            self.out_dir.rmdir()


def _config(args):
    skip = {"func", "inputs"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def write_manifest(stage, args, argv, inputs):
    hashes = {}
    for p in inputs:
        for f in _with_sidecar(p):
            hashes[str(f)] = sha256_file(f)
    outputs = {name: sha256_file(stage.path(name)) for name in stage.files()}
    manifest = {"tool": "susa", "version": __version__, "command": args.command,
                "argv": list(argv), "config": _config(args), "seed": getattr(args, "seed", None),
                "inputs": hashes, "outputs": outputs}
    with open(stage.path(MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialise {type(value).__name__}")


# -- commands ----------------------------------------------------------------------

def cmd_synth(args, stage):
    spec = SyntheticSceneSpec(classes=args.classes, bands=args.bands, height=args.height, width=args.width,
                              noise=args.noise, variation=args.variation, blob_scale=args.blob_scale,
                              wavelength_range=tuple(args.wavelength_range), seed=args.seed)
    cube, labels, endmembers = synth_scene(spec)
    save_cube(stage.path("scene.cube"), cube)
    save_labels(stage.path("truth.labels"), labels)
    save_tensor(stage.path("endmembers.tensor"), endmembers, {"classes": args.classes})
    log.info("classes:%d bands:%d height:%d width:%d", args.classes, args.bands, args.height, args.width)
    return []


def _sensor_dict(spec):
    return {"name": spec.name, "centers": list(spec.centers), "fwhm": list(spec.fwhm)}


def cmd_sample_patches(args, stage):
    cubes = [load_cube(_require(p)) for p in args.cube]
    specs = {(c.spec.centers, c.spec.fwhm) for c in cubes}
    if len(specs) != 1:
        raise RunError("all cubes must share one sensor; resample them first")
    ps = sample_patches(cubes, args.count, args.size, args.seed, args.val_fraction)
    save_tensor(stage.path("patches.tensor"), ps.patches,
                {"n_train": ps.n_train, "size": args.size, "sensor": _sensor_dict(cubes[0].spec)})
    _write_json(stage.path("patch_coords.json"), {"columns": ["cube", "row", "col"], "coords": ps.coords})
    log.info("patches:%d train:%d val:%d", len(ps.patches), ps.n_train, len(ps.patches) - ps.n_train)
    return list(args.cube)


def cmd_train_smcae(args, stage):
    patches, meta = load_tensor(_require(args.patches))
    n_train = int(meta.get("n_train", len(patches)))
    s = meta.get("sensor")
    sensor = None if s is None else SensorSpec(tuple(s["centers"]), tuple(s["fwhm"]), s["name"])
    config = McaeConfig(loss_weights=tuple(args.loss_weights), activation=args.activation,
                        learning_rate=args.learning_rate, batch_size=args.batch_size,
                        width_scale=args.width_scale, weight_decay=args.weight_decay,
                        max_epochs=args.max_epochs, drop_patience=args.drop_patience,
                        stop_patience=args.stop_patience)
    stack, histories = train_smcae_stack(patches[:n_train], args.stages, config, args.seed,
                                         val_patches=patches[n_train:], sensor=sensor,
                                         max_steps=args.max_steps)
    save_checkpoint(stage.path("stack.ckpt"), stack)
    _write_json(stage.path("history.json"), {"stages": histories})
    return [args.patches]


def cmd_extract(args, stage):
    stack = load_checkpoint(_require(args.stack))
    if not isinstance(stack, SmcaeStack):
        raise RunError(f"{args.stack} holds a {stack.kind} checkpoint, not a stack")
    cube = load_cube(_require(args.cube))
    feats = smcae_extract(stack, cube, resample=not args.no_resample, stats=args.stats)
    save_tensor(stage.path("features.tensor"), feats.values, feats.meta)
    log.info("height:%d width:%d channels:%d", *feats.values.shape)
    return [args.stack, args.cube]


def _load_features(path):
    values, meta = load_tensor(_require(path))
    if values.ndim != 3:
        raise RunError(f"{path}: expected an (H, W, F) feature tensor, got shape {values.shape}")
    return FeatureTensor(values, meta)


def cmd_fuse(args, stage):
    if args.names and len(args.names) != len(args.features):
        raise RunError(f"{len(args.names)} names for {len(args.features)} feature files")
    fused = fuse_sensor_features([_load_features(p) for p in args.features], args.names)
    save_tensor(stage.path("features.tensor"), fused.values, fused.meta)
    return list(args.features)


def _overrides(items):
    out = {}
    for item in items or []:
        m = re.fullmatch(r"(\d+)=(\d+)", item)
        if not m:
            raise RunError(f"override {item!r} is not CLASS=COUNT")
        out[int(m.group(1))] = int(m.group(2))
    return out


def cmd_train_ssmlp(args, stage):
    feats = _load_features(args.features)
    labels = load_labels(_require(args.labels))
    if feats.values.shape[:2] != labels.values.shape:
        raise RunError(f"features are {feats.values.shape[:2]} but labels are {labels.values.shape}")
    split = lowshot_split(labels, args.L, args.seed, _overrides(args.override))
    config = SsmlpConfig(hidden_widths=tuple(args.hidden_widths), lambda_recon=tuple(args.lambda_recon),
                         activation=args.activation, learning_rate=args.learning_rate,
                         batch_size=args.batch_size, weight_decay=args.weight_decay,
                         drop_patience=args.drop_patience, stop_patience=args.stop_patience,
                         unlabeled_ratio=args.unlabeled_ratio, max_epochs=args.max_epochs,
                         decoder_noise=args.decoder_noise, monitor=args.monitor)
    model, history = train_lowshot(config, feats, split, labels.classes, args.seed,
                                   unlabeled=args.unlabeled, stats_from=args.stats)
    save_checkpoint(stage.path("model.ckpt"), model)
    _write_json(stage.path("split.json"), split.to_dict())
    _write_json(stage.path("history.json"), history)
    log.info("epochs:%d stopped:%s final_val_oa:%.6g", history["epochs"], history["stopped"],
             history["val_oa"][-1])
    return [args.features, args.labels]


def cmd_classify(args, stage):
    model = load_checkpoint(_require(args.model))
    if not isinstance(model, SsmlpModel):
        raise RunError(f"{args.model} holds a {model.kind} checkpoint, not a classifier")
    feats = _load_features(args.features)
    pred, probs = predict_map(model, feats)
    names = [f"class_{c}" for c in range(1, model.classes + 1)]
    save_labels(stage.path("prediction.labels"), LabelMap(pred, names))
    if args.probabilities:
        save_tensor(stage.path("probabilities.tensor"), probs, {"classes": model.classes})
    return [args.model, args.features]


def _metrics_record(truth, pred, mask, classes):
    cm = confusion(truth[mask], pred[mask], classes)
    m = metrics(cm)
    return {"OA": m["OA"], "AA": m["AA"], "kappa": m["kappa"], "degenerate": m["degenerate"],
            "pixels": int(mask.sum()), "confusion": np.asarray(cm).astype(int).tolist()}


def cmd_evaluate(args, stage):
    truth = load_labels(_require(args.truth))
    pred = load_labels(_require(args.prediction))
    if truth.values.shape != pred.values.shape:
        raise RunError(f"truth is {truth.values.shape} but prediction is {pred.values.shape}")
    classes = max(truth.classes, pred.classes)
    inputs = [args.truth, args.prediction]
    report = {}
    if args.split:
        with open(_require(args.split)) as fh:
            split = LowShotSplit.from_dict(json.load(fh))
        inputs.append(args.split)
        for mode, inclusive in (("exclusive", False), ("inclusive", True)):
            mask = evaluation_mask(truth, split, inclusive=inclusive)
            report[mode] = _metrics_record(truth.values, pred.values, mask, classes)
        primary = "inclusive" if args.inclusive else "exclusive"
    else:
        report["all_labeled"] = _metrics_record(truth.values, pred.values, truth.values > 0, classes)
        primary = "all_labeled"
    report["primary"] = primary
    _write_json(stage.path("metrics.json"), report)
    lines = []
    for mode in [k for k in report if k != "primary"]:
        r = report[mode]
        lines.append(f"mode:{mode} OA:{r['OA']:.6g} AA:{r['AA']:.6g} kappa:{r['kappa']:.6g} pixels:{r['pixels']}")
    with open(stage.path("metrics.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    r = report[primary]
    print(f"OA={r['OA']:.6g} AA={r['AA']:.6g} kappa={r['kappa']:.6g}")
    return inputs


def cmd_dissimilarity(args, stage):
    a, b = _load_features(args.a), _load_features(args.b)
    if a.values.shape[:2] != b.values.shape[:2]:
        raise RunError(f"feature maps differ in size: {a.values.shape[:2]} vs {b.values.shape[:2]}")
    d = dissimilarity(a.values.reshape(-1, a.channels), b.values.reshape(-1, b.channels),
                      subsample=args.subsample, seed=args.seed)
    _write_json(stage.path("dissimilarity.json"), {"dissimilarity": d, "subsample": args.subsample})
    print(f"dissimilarity={d:.6g}")
    return [args.a, args.b]


def cmd_gradcheck(args, stage):
    results = run_gradient_suite(args.trials, args.seed, args.cases)
    failed = [k for k, v in results.items() if not v < TOLERANCE]
    _write_json(stage.path("gradcheck.json"), {"tolerance": TOLERANCE, "trials": args.trials,
                                               "max_relative_error": results})
    for name, err in results.items():
        print(f"case:{name} max_relative_error:{err:.3g} pass:{str(err < TOLERANCE).lower()}")
    if failed:
        # a failed check is a result: outputs are published, the exit status says so
        stage.exit_status = 1
        print(f"status:fail command:gradcheck failed:{','.join(failed)}", file=sys.stderr)
    return []


# -- parser ------------------------------------------------------------------------

def _common(p, seed_required=False, seed_default=None):
    p.add_argument("--out-dir", required=True, help="directory for outputs and run_manifest.json")
    p.add_argument("--workers", type=int, default=1,
                   help="threads for numeric kernels (default %(default)s; 1 gives bitwise-reproducible runs)")
    p.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])
    if seed_required:
        p.add_argument("--seed", type=int, required=True, help="random seed (required)")
    elif seed_default is not None:
        p.add_argument("--seed", type=int, default=seed_default, help="random seed (default %(default)s)")


def build_parser():
    parser = argparse.ArgumentParser(prog="susa", description="Low-shot hyperspectral segmentation pipeline.")
    parser.add_argument("--version", action="version", version=f"susa {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic scene")
    _common(p, seed_required=True)
    p.add_argument("--classes", type=int, default=4, help="number of classes (default %(default)s)")
    p.add_argument("--bands", type=int, default=32, help="spectral bands (default %(default)s)")
    p.add_argument("--height", type=int, default=64, help="rows (default %(default)s)")
    p.add_argument("--width", type=int, default=64, help="columns (default %(default)s)")
    p.add_argument("--noise", type=float, default=0.01, help="white-noise std (default %(default)s)")
    p.add_argument("--variation", type=float, default=0.05, help="intra-class variation (default %(default)s)")
    p.add_argument("--blob-scale", type=float, default=6.0,
                   help="smoothing scale of class regions (default %(default)s)")
    p.add_argument("--wavelength-range", type=float, nargs=2, default=[400.0, 1000.0], metavar=("NM", "NM"),
                   help="first and last band center in nm (default %(default)s)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sample-patches", help="draw random square patches from cubes")
    _common(p, seed_required=True)
    p.add_argument("--cube", nargs="+", required=True, help="input cube files")
    p.add_argument("--count", type=int, default=50000, help=f"number of patches (default %(default)s, {REF})")
    p.add_argument("--size", type=int, default=32, help=f"patch side in pixels (default %(default)s, {REF})")
    p.add_argument("--val-fraction", type=float, default=0.1,
                   help=f"validation share (default %(default)s, {REF})")
    p.set_defaults(func=cmd_sample_patches)

    d = McaeConfig()
    p = sub.add_parser("train-smcae", help="train a stack of multi-loss convolutional autoencoders")
    _common(p, seed_required=True)
    p.add_argument("--patches", required=True, help="patch tensor from sample-patches")
    p.add_argument("--stages", type=int, default=5, help=f"autoencoders in the stack (default %(default)s, {REF})")
    p.add_argument("--width-scale", type=float, default=d.width_scale,
                   help=f"multiplier on every layer width (default %(default)s, {REF})")
    p.add_argument("--loss-weights", type=float, nargs=4, default=list(d.loss_weights),
                   help=f"per-depth reconstruction weights, shallowest first (default %(default)s, {REF})")
    p.add_argument("--activation", choices=["pelu", "relu"], default=d.activation,
                   help=f"activation (default %(default)s, {REF})")
    p.add_argument("--learning-rate", type=float, default=d.learning_rate,
                   help=f"initial learning rate (default %(default)s, {REF})")
    p.add_argument("--batch-size", type=int, default=d.batch_size, help=f"batch size (default %(default)s, {REF})")
    p.add_argument("--weight-decay", type=float, default=d.weight_decay, help="L2 on weights (default %(default)s)")
    p.add_argument("--max-epochs", type=int, default=d.max_epochs, help="epoch cap (default %(default)s)")
    p.add_argument("--max-steps", type=int, default=None, help="optimizer-step cap per stage (default none)")
    p.add_argument("--drop-patience", type=int, default=d.drop_patience,
                   help=f"stalled epochs before a tenfold learning-rate drop (default %(default)s, {REF})")
    p.add_argument("--stop-patience", type=int, default=d.stop_patience,
                   help=f"stalled epochs before stopping (default %(default)s, {REF})")
    p.set_defaults(func=cmd_train_smcae)

    p = sub.add_parser("extract", help="feature responses of a trained stack on a cube")
    _common(p)
    p.add_argument("--stack", required=True, help="stack checkpoint")
    p.add_argument("--cube", required=True, help="input cube")
    p.add_argument("--stats", choices=["image", "stored"], default="image",
                   help="standardise with the image's own statistics or the training ones (default %(default)s)")
    p.add_argument("--no-resample", action="store_true", help="reject cubes from a different sensor")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("fuse", help="concatenate feature tensors along channels")
    _common(p)
    p.add_argument("--features", nargs="+", required=True, help="feature tensors, in fusion order")
    p.add_argument("--names", nargs="+", default=None, help="names recorded for each input")
    p.set_defaults(func=cmd_fuse)

    d = SsmlpConfig()
    p = sub.add_parser("train-ssmlp", help="train the semi-supervised classifier on a low-shot split")
    _common(p, seed_required=True)
    p.add_argument("--features", required=True, help="(H, W, F) feature tensor")
    p.add_argument("--labels", required=True, help="label map; 0 marks unlabeled pixels")
    p.add_argument("--L", type=int, default=50, help=f"labeled samples per class (default %(default)s, {REF})")
    p.add_argument("--override", action="append", metavar="CLASS=COUNT",
                   help="per-class sample count, repeatable")
    p.add_argument("--hidden-widths", type=int, nargs="+", default=list(d.hidden_widths),
                   help=f"encoder widths (default %(default)s, {REF})")
    p.add_argument("--lambda-recon", type=float, nargs="+", default=list(d.lambda_recon),
                   help=f"reconstruction weights: input, hidden layers, class layer (default %(default)s, {REF})")
    p.add_argument("--activation", choices=["pelu", "relu"], default=d.activation,
                   help=f"activation (default %(default)s, {REF})")
    p.add_argument("--learning-rate", type=float, default=d.learning_rate,
                   help=f"initial learning rate (default %(default)s, {REF})")
    p.add_argument("--batch-size", type=int, default=d.batch_size,
                   help=f"labeled samples per batch (default %(default)s, {REF})")
    p.add_argument("--weight-decay", type=float, default=d.weight_decay,
                   help=f"L2 on weights (default %(default)s, {REF})")
    p.add_argument("--drop-patience", type=int, default=d.drop_patience,
                   help=f"stalled epochs before a tenfold learning-rate drop (default %(default)s, {REF})")
    p.add_argument("--stop-patience", type=int, default=d.stop_patience,
                   help=f"stalled epochs before stopping (default %(default)s, {REF})")
    p.add_argument("--unlabeled-ratio", type=float, default=d.unlabeled_ratio,
                   help="unlabeled pixels per labeled pixel in a batch (default %(default)s)")
    p.add_argument("--unlabeled", type=int, default=None,
                   help="subsample the unlabeled pool to this many pixels (default: whole image minus validation)")
    p.add_argument("--max-epochs", type=int, default=d.max_epochs, help="epoch cap (default %(default)s)")
    p.add_argument("--decoder-noise", type=float, default=d.decoder_noise,
                   help="Gaussian noise std on the decoder input (default %(default)s)")
    p.add_argument("--stats", choices=["image", "train"], default="image",
                   help="standardise with statistics of the whole image or of the training pixels only "
                        "(default %(default)s)")
    p.add_argument("--monitor", choices=["oa", "aa"], default=d.monitor,
                   help="validation accuracy driving the schedule (default %(default)s)")
    p.set_defaults(func=cmd_train_ssmlp)

    p = sub.add_parser("classify", help="per-pixel prediction with a trained classifier")
    _common(p)
    p.add_argument("--model", required=True, help="classifier checkpoint")
    p.add_argument("--features", required=True, help="(H, W, F) feature tensor")
    p.add_argument("--probabilities", action="store_true", help="also write per-class probability planes")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="OA, AA and kappa of a prediction against truth")
    _common(p)
    p.add_argument("--truth", required=True, help="truth label map")
    p.add_argument("--prediction", required=True, help="predicted label map")
    p.add_argument("--split", default=None,
                   help="split.json from train-ssmlp; reports scores without and with its training pixels")
    p.add_argument("--inclusive", action="store_true",
                   help="print the score that includes training pixels (default excludes them)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("dissimilarity", help="rank-correlation dissimilarity of two feature tensors")
    _common(p, seed_default=0)
    p.add_argument("--a", required=True, help="first feature tensor")
    p.add_argument("--b", required=True, help="second feature tensor")
    p.add_argument("--subsample", type=int, default=None, help="pixels to sample (default: all)")
    p.set_defaults(func=cmd_dissimilarity)

    p = sub.add_parser("gradcheck", help="finite-difference check of every kernel and objective")
    _common(p, seed_default=0)
    p.add_argument("--trials", type=int, default=20, help="random instances per case (default %(default)s)")
    p.add_argument("--cases", nargs="+", choices=sorted(CASES), default=None, help="subset of cases")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _configure_logging(level):
    """Route ``susa`` logs to stderr as key:value lines; returns a callable that undoes it."""
    root = logging.getLogger("susa")
    saved = (list(root.handlers), root.level, root.propagate)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(KeyValueFormatter())
    root.handlers = [handler]
    root.setLevel(level.upper())
    root.propagate = False

    def restore():
        root.handlers, root.level, root.propagate = saved[0], saved[1], saved[2]
    return restore


def _error_line(command, exc):
    return f"status:error command:{command} kind:{type(exc).__name__} message:{json.dumps(str(exc))}"


def run(argv=None):
    """Run one command; returns the process exit status."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    if args.workers < 1:
        print(_error_line(args.command, ValueError("--workers must be at least 1")), file=sys.stderr)
        return 2
    restore_logging = _configure_logging(args.log_level)
    stage = None
    try:
        stage = Staging(args.out_dir)
        with threadpool_limits(limits=args.workers):
            inputs = args.func(args, stage)
        write_manifest(stage, args, argv, inputs)
        stage.commit()
        log.info("status:ok command:%s out_dir:%s", args.command, args.out_dir)
        return stage.exit_status
    except Exception as exc:  # one machine-parseable line, no traceback
        if stage is not None and stage.dir.exists():
            stage.abort()
        print(_error_line(args.command, exc), file=sys.stderr)
        return 1
    finally:
        restore_logging()


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
