"""Shared fixtures.

The closed-loop experiments need trained pose/force models; training them
takes minutes, so they are built once and cached under tests/.cache keyed
by the sensor-model calibration. Delete the cache after changing the
sensor or learning defaults.
"""

import hashlib
import json
from pathlib import Path

import pytest

from tacgrasp.experiments import build_sensor_array, experiment_train_config, prepare_models

CACHE_ROOT = Path(__file__).parent / ".cache"


def _calibration_fingerprint(sensors) -> str:
    geom = sensors[0].geom
    cfg = experiment_train_config(0)
    blob = json.dumps([
        geom.pin_stiffness_normal, geom.pin_stiffness_shear, geom.skin_stiffness,
        geom.friction, [s.var.optical_gain for s in sensors],
        list(cfg.layer_sizes), cfg.epochs, cfg.pretrain_epochs, cfg.finetune_epochs,
    ], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@pytest.fixture(scope="session")
def sensor_array():
    return build_sensor_array(variation_seed=0)


@pytest.fixture(scope="session")
def exp_models(sensor_array):
    """The five standard-transfer models used inside the control loops."""
    cache = CACHE_ROOT / f"exp_models_{_calibration_fingerprint(sensor_array)}"
    models, mae = prepare_models(sensor_array, cache)
    return models, mae
