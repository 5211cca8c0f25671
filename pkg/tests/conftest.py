import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from dsfusion.synthetic import make_shapes_dataset

settings.register_profile(
    "default",
    deadline=None,
    max_examples=20,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def small_root(tmp_path_factory):
    """4 train + 2 test pairs at 32x32, for fast unit tests."""
    root = tmp_path_factory.mktemp("shapes32")
    return make_shapes_dataset(root, n_train=4, n_test=2, size=32, seed=11)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
