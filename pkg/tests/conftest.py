import numpy as np
import pytest

from poselift.data import SynthConfig, prepare, synthesize
from poselift.skeleton import default_schema


@pytest.fixture(scope="session")
def schema():
    return default_schema()


@pytest.fixture(scope="session")
def synth_records():
    return synthesize(SynthConfig.load(count=96, seed=7))


@pytest.fixture(scope="session")
def small_dataset(synth_records):
    return prepare(synth_records)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
