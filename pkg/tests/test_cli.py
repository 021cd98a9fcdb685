import json
import re

import numpy as np
import pytest

from susa import cli
from susa.dataio import LabelMap, load_labels, load_tensor, save_labels, save_tensor

KEY_VALUE_LOG = re.compile(r"^level:[A-Z]+ source:[\w.]+ \w+:")


def run(capsys, *argv):
    code = cli.run([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def labels_file(path, values, classes=3):
    save_labels(path, LabelMap(np.asarray(values), [f"c{i}" for i in range(1, classes + 1)]))
    return path


# -- basics --------------------------------------------------------------------------

def test_identical_maps_score_one(tmp_path, capsys):
    truth = labels_file(tmp_path / "t.labels", [[1, 2, 3], [3, 0, 1]])
    code, out, _ = run(capsys, "evaluate", "--truth", truth, "--prediction", truth, "--out-dir", tmp_path / "ev")
    assert code == 0
    assert out.strip() == "OA=1 AA=1 kappa=1"
    report = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert report["all_labeled"]["pixels"] == 5
    assert (tmp_path / "ev" / "metrics.txt").read_text().startswith("mode:all_labeled OA:1 AA:1 kappa:1")


def test_unknown_command_prints_usage(tmp_path, capsys):
    code, _, err = run(capsys, "frobnicate", "--out-dir", tmp_path)
    assert code != 0 and "usage:" in err


def test_unknown_flag_is_rejected(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--seed", "1", "--out-dir", tmp_path / "o", "--colour", "red")
    assert code != 0 and "unrecognized arguments" in err
    assert not (tmp_path / "o").exists()


def test_training_commands_require_a_seed(tmp_path, capsys):
    for command in ("synth", "sample-patches", "train-smcae", "train-ssmlp"):
        code, _, err = run(capsys, command, "--out-dir", tmp_path / command)
        assert code != 0 and "--seed" in err


def test_help_names_reference_defaults(capsys):
    parser = cli.build_parser()
    text = parser._subparsers._group_actions[0].choices["train-ssmlp"].format_help()
    assert "reference setting" in text and "1600, 950, 250, 225" in text


def test_worker_count_must_be_positive(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--seed", "1", "--workers", "0", "--out-dir", tmp_path / "o")
    assert code == 2 and err.startswith("status:error command:synth kind:ValueError")


# -- failures leave nothing behind --------------------------------------------------

def test_missing_input_is_one_parseable_line(tmp_path, capsys):
    code, _, err = run(capsys, "evaluate", "--truth", tmp_path / "nope.labels",
                       "--prediction", tmp_path / "nope.labels", "--out-dir", tmp_path / "ev")
    assert code == 1
    line, = err.strip().splitlines()
    assert line.startswith("status:error command:evaluate kind:FileNotFoundError message:")
    assert json.loads(line.split("message:", 1)[1]).startswith("input file not found")
    assert not (tmp_path / "ev").exists()


def test_failure_after_writing_removes_partial_outputs(tmp_path, capsys, monkeypatch):
    truth = labels_file(tmp_path / "t.labels", [[1, 2], [2, 1]])
    out_dir = tmp_path / "existing"
    out_dir.mkdir()
    (out_dir / "keep.txt").write_text("untouched")

    def broken_manifest(*_):
        raise OSError("disk full")
    monkeypatch.setattr(cli, "write_manifest", broken_manifest)
    code, _, err = run(capsys, "evaluate", "--truth", truth, "--prediction", truth, "--out-dir", out_dir)
    assert code == 1 and "disk full" in err
    assert sorted(p.name for p in out_dir.iterdir()) == ["keep.txt"]


def test_shape_mismatch_is_rejected(tmp_path, capsys):
    a = labels_file(tmp_path / "a.labels", [[1, 2]])
    b = labels_file(tmp_path / "b.labels", [[1], [2]])
    code, _, err = run(capsys, "evaluate", "--truth", a, "--prediction", b, "--out-dir", tmp_path / "ev")
    assert code == 1 and "kind:RunError" in err


# -- manifests and logs --------------------------------------------------------------

def test_manifest_records_config_and_hashes(tmp_path, capsys):
    code, _, _ = run(capsys, "synth", "--seed", 3, "--height", 16, "--width", 16, "--bands", 6,
                     "--out-dir", tmp_path / "s")
    assert code == 0
    manifest = json.loads((tmp_path / "s" / "run_manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["command"] == "synth"
    assert manifest["config"]["bands"] == 6
    assert set(manifest["outputs"]) == {"scene.cube", "scene.cube.hdr", "truth.labels", "truth.labels.hdr",
                                        "endmembers.tensor", "endmembers.tensor.hdr"}
    assert manifest["outputs"]["scene.cube"] == cli.sha256_file(tmp_path / "s" / "scene.cube")
    assert not any(p.name.startswith(".staging") for p in (tmp_path / "s").iterdir())


def test_logs_are_key_value_lines(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--seed", 1, "--height", 16, "--width", 16, "--out-dir", tmp_path / "s")
    assert code == 0
    lines = err.strip().splitlines()
    assert lines and all(KEY_VALUE_LOG.match(line) for line in lines)


def test_run_leaves_library_logging_alone(tmp_path, capsys):
    import logging
    before = logging.getLogger("susa").propagate
    run(capsys, "synth", "--seed", 1, "--height", 16, "--width", 16, "--out-dir", tmp_path / "s")
    assert logging.getLogger("susa").propagate == before


# -- the whole pipeline ------------------------------------------------------------------

def test_small_pipeline_end_to_end(tmp_path, capsys):
    d = tmp_path

    def ok(*argv):
        code, out, err = run(capsys, *argv)
        assert code == 0, err
        return out

    ok("synth", "--seed", 0, "--height", 16, "--width", 16, "--bands", 8, "--classes", 3, "--out-dir", d / "scene")
    cube = d / "scene" / "scene.cube"
    truth = d / "scene" / "truth.labels"
    before = cli.sha256_file(cube)
    ok("sample-patches", "--seed", 0, "--cube", cube, "--count", 8, "--size", 8, "--out-dir", d / "patches")
    ok("train-smcae", "--seed", 0, "--patches", d / "patches" / "patches.tensor", "--stages", 2,
       "--width-scale", 1 / 64, "--batch-size", 4, "--max-steps", 2, "--out-dir", d / "stack")
    ok("extract", "--stack", d / "stack" / "stack.ckpt", "--cube", cube, "--out-dir", d / "feat")
    feats = d / "feat" / "features.tensor"
    values, meta = load_tensor(feats)
    assert values.shape == (16, 16, 8) and meta["stages"] == 2
    ok("fuse", "--features", feats, feats, "--names", "a", "b", "--out-dir", d / "fused")
    assert load_tensor(d / "fused" / "features.tensor")[0].shape == (16, 16, 16)
    ok("train-ssmlp", "--seed", 0, "--features", feats, "--labels", truth, "--L", 3,
       "--hidden-widths", 8, 6, 5, 4, "--max-epochs", 2, "--out-dir", d / "clf")
    ok("classify", "--model", d / "clf" / "model.ckpt", "--features", feats, "--probabilities",
       "--out-dir", d / "pred")
    pred = load_labels(d / "pred" / "prediction.labels")
    assert pred.values.shape == (16, 16) and pred.class_names == ["class_1", "class_2", "class_3"]
    out = ok("evaluate", "--truth", truth, "--prediction", d / "pred" / "prediction.labels",
             "--split", d / "clf" / "split.json", "--out-dir", d / "eval")
    assert re.fullmatch(r"OA=\S+ AA=\S+ kappa=\S+\n", out)
    report = json.loads((d / "eval" / "metrics.json").read_text())
    assert report["primary"] == "exclusive"
    assert report["inclusive"]["pixels"] - report["exclusive"]["pixels"] == 9
    out = ok("dissimilarity", "--a", feats, "--b", feats, "--out-dir", d / "dis")
    assert out.strip() == "dissimilarity=0"
    assert cli.sha256_file(cube) == before


def test_checkpoint_kind_is_checked(tmp_path, capsys):
    save_tensor(tmp_path / "f.tensor", np.zeros((4, 4, 2)))
    run(capsys, "synth", "--seed", 0, "--height", 16, "--width", 16, "--bands", 4, "--out-dir", tmp_path / "s")
    code, _, err = run(capsys, "classify", "--model", tmp_path / "s" / "scene.cube", "--features",
                       tmp_path / "f.tensor", "--out-dir", tmp_path / "c")
    assert code == 1 and "not a checkpoint" in err
    run(capsys, "sample-patches", "--seed", 0, "--cube", tmp_path / "s" / "scene.cube", "--count", 4,
        "--size", 8, "--out-dir", tmp_path / "p")
    run(capsys, "train-smcae", "--seed", 0, "--patches", tmp_path / "p" / "patches.tensor", "--stages", 1,
        "--width-scale", 1 / 64, "--max-steps", 1, "--out-dir", tmp_path / "k")
    code, _, err = run(capsys, "classify", "--model", tmp_path / "k" / "stack.ckpt", "--features",
                       tmp_path / "f.tensor", "--out-dir", tmp_path / "c")
    assert code == 1 and "not a classifier" in err


def test_gradcheck_command(tmp_path, capsys):
    code, out, _ = run(capsys, "gradcheck", "--trials", 2, "--cases", "dense", "relu", "--out-dir", tmp_path / "g")
    assert code == 0
    assert [line.split()[0] for line in out.strip().splitlines()] == ["case:dense", "case:relu"]
    assert all(line.endswith("pass:true") for line in out.strip().splitlines())
    assert json.loads((tmp_path / "g" / "gradcheck.json").read_text())["tolerance"] == 1e-5


def test_failed_gradcheck_still_publishes(tmp_path, capsys, monkeypatch):
    monkeypatch.setattr(cli, "run_gradient_suite", lambda *a: {"dense": 1.0})
    code, out, err = run(capsys, "gradcheck", "--out-dir", tmp_path / "g")
    assert code == 1 and "pass:false" in out and "status:fail" in err
    assert (tmp_path / "g" / "gradcheck.json").exists()


@pytest.mark.parametrize("item", ["3", "a=2", "3=x"])
def test_bad_override_is_rejected(item):
    with pytest.raises(cli.RunError):
        cli._overrides([item])
