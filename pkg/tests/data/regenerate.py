"""Rewrite the golden files next to this script.

Only run this after an intended format change; the dataio tests compare
freshly written files against these bytes.
"""
from pathlib import Path

import numpy as np

from susa.dataio import LabelMap, save_checkpoint, save_cube, save_labels, save_tensor
from susa.mcae import McaeConfig, build_mcae
from susa.spectral import HsiCube, SensorSpec

HERE = Path(__file__).resolve().parent


def golden_cube():
    values = (np.arange(24, dtype=np.float32).reshape(2, 3, 4) * 0.25 - 1.5)
    spec = SensorSpec((450.0, 550.0, 650.0, 750.0), (10.0, 10.0, 10.0, 12.5), "golden")
    return HsiCube(values, spec, 2.5)


def golden_labels():
    return LabelMap(np.array([[0, 1, 2], [2, 1, 0]]), ["soil", "water"])


def golden_tensor():
    return np.array([[1.0, -2.0], [0.5, 3.25], [0.0, -0.125]], np.float32)


def golden_model():
    config = McaeConfig(encoder_widths=(2, 3), refinement_widths=(2,), loss_weights=(1.0, 0.5),
                        batch_size=2)
    model = build_mcae(config, 1, seed=0)
    for k, p in enumerate(model.parameters()):
        p.value = (np.arange(p.value.size, dtype=np.float32).reshape(p.value.shape) + k) / 8
    return model


def main():
    save_cube(HERE / "golden.cube", golden_cube())
    save_labels(HERE / "golden.labels", golden_labels())
    save_tensor(HERE / "golden.tensor", golden_tensor(), {"note": "golden"})
    save_checkpoint(HERE / "golden.ckpt", golden_model())


if __name__ == "__main__":
    main()
