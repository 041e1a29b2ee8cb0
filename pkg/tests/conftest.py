import numpy as np
import pytest
import torch

from stylemine.models import NetConfig, build_generator, build_task_model, freeze

torch.set_num_threads(1)

TINY = NetConfig(channels=8, latent_dim=4, n_classes=3, feat_dim=8, side=8, vae_hidden=8,
                 task_width=4)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_generator():
    G = build_generator(TINY, 0)
    G.mark_trained()
    return freeze(G)


@pytest.fixture
def tiny_task_model():
    return build_task_model(TINY, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
