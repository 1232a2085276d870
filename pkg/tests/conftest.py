import numpy as np
import pytest

from usnrt.data import SynthSpec, generate_synthetic
from usnrt.nn_core import TrainConfig


def feature_matrix(dataset):
    """Stack a synthetic dataset's continuous columns into an (n, d) matrix."""
    names = [c.name for c in dataset.schema.feature_columns]
    return np.column_stack([dataset.continuous[name] for name in names])


def fast_train_cfg(seed=0, max_epochs=80, patience=10):
    """Training config scaled down for unit-test speed."""
    return TrainConfig(max_epochs=max_epochs, patience=patience, seed=seed)


@pytest.fixture
def piecewise_sigma_data():
    """Variance boundary at x1 = 0: sigma 0.1 on the left, 1.0 on the right."""
    synth = generate_synthetic(
        SynthSpec(n=3000, d=2, sigma_low=0.1, sigma_high=1.0, seed=11)
    )
    return feature_matrix(synth.dataset), synth.dataset.labels, synth
