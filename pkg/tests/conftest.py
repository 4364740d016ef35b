import numpy as np
import pytest

from emt.features import features_from_trials
from emt.signalio import SyntheticSpec, synth_trials
from emt.tgc import WindowConfig


def small_data(task: str, seed: int = 0, n_trials: int = 4, duration: float = 30.0, c: int = 8):
    spec = SyntheticSpec(task=task, n_trials=n_trials, c=c, duration=duration, seed=seed)
    trials, splits = synth_trials(spec)
    return features_from_trials(trials, splits, task, WindowConfig(fs=spec.fs), window=24, hop=16)


@pytest.fixture(scope="session")
def clas_data():
    return small_data("classification")


@pytest.fixture(scope="session")
def regr_data():
    return small_data("regression", n_trials=5, duration=40.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
