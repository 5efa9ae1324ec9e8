import numpy as np
import pytest

from iccdit.core import Rng
from iccdit.model import DiffusionState, ModelConfig, ToyDiT
from iccdit.tasks import SyntheticTask


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture(scope="session")
def desk_config():
    return ModelConfig(mode="fulldit2", active_layers=(0, 2))


@pytest.fixture(scope="session")
def desk_model(desk_config):
    return ToyDiT.init(desk_config, seed=0)


@pytest.fixture(scope="session")
def copy_task(desk_config):
    return SyntheticTask("copy", desk_config.d_latent, desk_config.n_z, desk_config.contexts, 0)


def random_state(cfg, seed, t=None):
    r = Rng(seed)
    z = r.normal((cfg.n_z, cfg.d_latent)).astype(cfg.np_dtype)
    c = r.normal((cfg.layout.n_c, cfg.d_latent)).astype(cfg.np_dtype)
    return DiffusionState(z, float(r.uniform()) if t is None else t, c)
