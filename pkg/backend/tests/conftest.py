import numpy as np
import pytest

from app.schemas.encoder import TrainConfig
from app.services.synth_service import make_id_task
from app.services.vmf_service import sample_uniform_sphere


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_unit():
    """Factory for (n, d) uniform sphere points from a seeded generator"""
    def make(d: int, n: int, seed: int = 0) -> np.ndarray:
        return sample_uniform_sphere(d, n, np.random.default_rng(seed))
    return make


@pytest.fixture(scope="session")
def small_task():
    return make_id_task(d_in=12, d=4, num_classes=3, kappa=30.0, n=600, seed=3)


@pytest.fixture
def small_train_config():
    return TrainConfig(epochs=10, batch_size=32, hidden_width=16, hidden_layers=2, seed=0)
