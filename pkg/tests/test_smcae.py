import numpy as np
import pytest

from susa.dataio import SyntheticSceneSpec, sample_patches, synth_scene
from susa.evaluation import metrics_from_labels
from susa.mcae import McaeConfig, build_mcae, train_mcae
from susa.smcae import (FeatureTensor, SmcaeStack, StackTrainingError, fuse_sensor_features,
                        mean_pool_features, smcae_extract, train_smcae_stack)
from susa.spectral import HsiCube, SensorSpec, feature_stats
from susa.ssmlp import SsmlpConfig, build_ssmlp, predict_map

TINY = McaeConfig(width_scale=1 / 64, batch_size=4)
STAGE_TWO_STEPS = 100


def patch_data(n=6, size=8, bands=3, seed=0):
    return np.random.default_rng(seed).standard_normal((n, size, size, bands)).astype(np.float32) * 2 + 1


def tiny_stack(stages=2, bands=3, seed=0, epochs=1):
    sensor = SensorSpec.uniform(400, 400 + 50 * (bands - 1), bands, name="tiny")
    stack, _ = train_smcae_stack(patch_data(bands=bands), stages, TINY, seed=seed, sensor=sensor,
                                 max_epochs=epochs)
    return stack


# -- training ------------------------------------------------------------------------

def test_single_stage_matches_plain_training():
    x = patch_data()
    stack, histories = train_smcae_stack(x, 1, TINY, seed=3, max_epochs=2)
    model = build_mcae(TINY, 3, seed=[3, 0])
    history = train_mcae(model, feature_stats(x).apply(x), seed=[3, 0], max_epochs=2)
    assert histories[0]["train_loss"] == history["train_loss"]
    assert all(np.array_equal(model.params[k].value, stack.models[0].params[k].value) for k in model.params)


def test_stage_two_reads_stage_one_features():
    cfg = McaeConfig(width_scale=1 / 16, batch_size=4)
    stack, _ = train_smcae_stack(patch_data(4), 2, cfg, seed=0, max_epochs=1)
    assert stack.models[1].input_bands == 256 // 16
    assert stack.output_channels == 2 * 16


def test_stack_rejects_broken_chaining():
    a = build_mcae(TINY, 3, 0)
    b = build_mcae(TINY, 5, 0)
    with pytest.raises(ValueError, match="stage 1"):
        SmcaeStack([a, b])
    with pytest.raises(ValueError):
        train_smcae_stack(patch_data(), 0, TINY, seed=0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_failing_stage_reports_partial_stack():
    x = patch_data()
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(StackTrainingError, match="stage 0") as info:
        train_smcae_stack(x, 2, TINY, seed=0, max_epochs=1)
    assert info.value.stage == 0 and info.value.stack.depth == 0 and info.value.histories == []


def test_stage_two_loss_halves():
    cube, _, _ = synth_scene(SyntheticSceneSpec(bands=8, seed=0))
    patches = sample_patches([cube], 16, seed=0, val_fraction=0).patches
    cfg = McaeConfig(width_scale=1 / 16, batch_size=8)
    _, histories = train_smcae_stack(patches, 2, cfg, seed=0, max_steps=STAGE_TWO_STEPS, max_epochs=10 ** 6)
    losses = histories[1]["train_loss"]
    assert losses[-1] <= 0.5 * losses[0]


# -- extraction ----------------------------------------------------------------------

def test_reference_channel_count():
    assert 5 * McaeConfig().feature_width == 1280


def test_extraction_shape_and_purity():
    stack = tiny_stack()
    cube = HsiCube(np.random.default_rng(1).standard_normal((13, 11, 3)).astype(np.float32), stack.sensor)
    a = smcae_extract(stack, cube)
    b = smcae_extract(stack, cube)
    assert a.values.shape == (13, 11, stack.output_channels)
    assert np.array_equal(a.values, b.values)
    assert a.meta["stages"] == 2


def test_constant_cube_gives_zero_features():
    stack = tiny_stack()
    cube = HsiCube(np.full((8, 8, 3), 4.2, np.float32), stack.sensor)
    assert np.all(smcae_extract(stack, cube).values == 0)


def test_mean_pool_keeps_constant_maps():
    values = np.full((6, 7, 2), -1.25)
    assert np.allclose(mean_pool_features(values), values, atol=1e-12)


def test_mean_pool_is_a_centered_box_filter():
    values = np.zeros((9, 9, 1))
    values[4, 4, 0] = 25.0
    out = mean_pool_features(values)[..., 0]
    assert np.allclose(out[2:7, 2:7], 1.0) and out.sum() == pytest.approx(25.0)


def test_foreign_sensor_needs_resampling():
    stack = tiny_stack()
    other = SensorSpec.uniform(390, 520, 6, name="other")
    cube = HsiCube(np.random.default_rng(2).standard_normal((8, 8, 6)).astype(np.float32), other)
    assert smcae_extract(stack, cube).values.shape[2] == stack.output_channels
    with pytest.raises(ValueError, match="resampling is disabled"):
        smcae_extract(stack, cube, resample=False)


def test_stored_statistics_mode():
    stack = tiny_stack()
    cube = HsiCube(patch_data(1, 16)[0], stack.sensor)
    stored = smcae_extract(stack, cube, stats="stored").values
    assert stored.shape == (16, 16, stack.output_channels) and np.all(np.isfinite(stored))
    with pytest.raises(ValueError, match="stats"):
        smcae_extract(stack, cube, stats="batch")


# -- fusion --------------------------------------------------------------------------

def test_single_response_fuses_to_itself():
    f = FeatureTensor(np.random.default_rng(3).standard_normal((4, 5, 6)), {"sensor": "a"})
    fused = fuse_sensor_features([f])
    assert np.array_equal(fused.values, f.values) and fused.meta["order"] == ["a"]


def test_fusion_channel_arithmetic_and_order():
    parts = [FeatureTensor(np.full((2, 2, 1280), float(k))) for k in range(3)]
    fused = fuse_sensor_features(parts, ["x", "y", "z"])
    assert fused.channels == 3840
    assert fused.meta == {"order": ["x", "y", "z"], "channels": [1280] * 3}
    assert np.all(fused.values[..., 1280:2560] == 1.0)


def test_fusion_rejects_spatial_mismatch():
    with pytest.raises(ValueError, match="spatial"):
        fuse_sensor_features([FeatureTensor(np.zeros((2, 2, 1))), FeatureTensor(np.zeros((2, 3, 1)))])


def test_fusion_order_does_not_change_predictions():
    rng = np.random.default_rng(4)
    a = FeatureTensor(rng.standard_normal((6, 6, 3)).astype(np.float32))
    b = FeatureTensor(rng.standard_normal((6, 6, 2)).astype(np.float32))
    ab, ba = fuse_sensor_features([a, b]), fuse_sensor_features([b, a])
    perm = np.r_[3:5, 0:3]  # channel i of ba is channel perm[i] of ab
    model = build_ssmlp(SsmlpConfig(hidden_widths=(6, 5, 4, 3)), 5, 3, seed=0)
    model.stats = feature_stats(ab.values)
    swapped = build_ssmlp(SsmlpConfig(hidden_widths=(6, 5, 4, 3)), 5, 3, seed=0)
    for k, p in model.params.items():
        swapped.params[k].value = p.value.copy()
    swapped.params["enc1.weight"].value = model.params["enc1.weight"].value[perm]
    swapped.stats = feature_stats(ba.values)
    labels_ab, _ = predict_map(model, ab)
    labels_ba, _ = predict_map(swapped, ba)
    truth = rng.integers(1, 4, (6, 6))
    assert metrics_from_labels(truth, labels_ab, 3) == metrics_from_labels(truth, labels_ba, 3)
