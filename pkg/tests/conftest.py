import numpy as np
import pytest

from config import ExperimentConfig, GpsConfig, PolicyConfig, GmmConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_gps_config(**overrides) -> GpsConfig:
    """A few short pours; enough to exercise every stage in seconds."""
    cfg = GpsConfig(N=2, T=8, n=2, inner_iters=2, max_outer_iters=2, seed=7)
    cfg.gmm = GmmConfig(K=2, max_iters=20)
    cfg.policy = PolicyConfig(epochs=3, samples_per_step=2)
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


@pytest.fixture
def gps_config():
    return small_gps_config()


@pytest.fixture
def experiment_config(tmp_path):
    cfg = ExperimentConfig(name='test', seed=7, out_dir=str(tmp_path / 'run'))
    cfg.gps = small_gps_config()
    return cfg
