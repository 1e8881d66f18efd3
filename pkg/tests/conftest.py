import numpy as np
import pytest

from krfws.data_tools import synth_faces
from krfws.forest_tools import ForestParams
from krfws.geom_tools import load_mean_shape


@pytest.fixture(scope="session")
def mean3d():
    return load_mean_shape()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def synth_train(mean3d):
    return synth_faces(40, seed=7, scheme="face5", mean3d=mean3d, size=128)


@pytest.fixture(scope="session")
def synth_test(mean3d):
    return synth_faces(20, seed=8, scheme="face5", mean3d=mean3d, size=128)


@pytest.fixture
def small_forest():
    return ForestParams(n_trees=3, max_depth=4, min_samples=5)


@pytest.fixture
def run_dir(tmp_path):
    return str(tmp_path / "run")


@pytest.fixture(autouse=True)
def _single_thread(monkeypatch):
    # tests must not depend on the number of CPUs
    monkeypatch.setenv("KRFWS_THREADS", "2")
