import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from threadpoolctl import threadpool_limits

from landscape_probe.data import SyntheticSpec, make_synthetic
from landscape_probe.gradcore import Tape, Tensor
from landscape_probe.model import build_model, desk_config

settings.register_profile("ci", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("ci")


@pytest.fixture(autouse=True, scope="session")
def single_thread():
    # determinism is only promised for single-threaded BLAS
    with threadpool_limits(limits=1):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(stride=1, num_classes=3):
    return desk_config(stride=stride, num_classes=num_classes, stem_channels=4, stages=((1, 4), (1, 6)))


def calibrated(model, x):
    """One training-mode forward so batchnorm running stats exist, then eval mode."""
    model.train()
    with Tape():
        model(Tensor(x))
    return model.eval()


@pytest.fixture
def tiny_model():
    m = build_model(tiny_config(), seed=0, dtype=np.float64)
    x = np.random.default_rng(0).uniform(size=(8, 3, 8, 8))
    return calibrated(m, x)


@pytest.fixture(scope="session")
def two_class_data():
    common = dict(classes=2, height=8, width=8, noise=0.1)
    train_set = make_synthetic(SyntheticSpec(per_class=100, seed=0, **common))
    test_set = make_synthetic(SyntheticSpec(per_class=50, seed=1, split="test", **common))
    return train_set, test_set
