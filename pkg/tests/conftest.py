import numpy as np
import pytest

from fedrecsim import model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_params(rng, num_items=6, embed_dim=4, hidden=(3,)):
    cfg = model.ModelConfig(embed_dim=embed_dim, mlp_hidden_dims=hidden)
    return cfg, model.init_global_params(num_items, cfg, rng)


@pytest.fixture
def small_params(rng):
    return make_params(rng)
