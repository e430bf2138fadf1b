"""Shared fixtures for the root-level test files."""

import numpy as np
import pytest

from compatlab.compat_losses import CompatLossSpec
from compatlab.embedding_model import ArcFaceParams, ModelConfig
from compatlab.synthetic_data import DatasetSpec, generate_dataset
from compatlab.trainer import TrainConfig

FD_STEP = 1e-5


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def numeric_gradient(f, x, h=FD_STEP):
    """Central finite differences of scalar ``f`` at array ``x``"""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        up = f(x)
        flat[i] = saved - h
        down = f(x)
        flat[i] = saved
        out[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-6)
    return float(np.linalg.norm(analytic - numeric) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_spec():
    return DatasetSpec(num_classes=6, samples_per_class=20, input_dim=12, latent_dim=4,
                       intra_class_noise=0.1, domain_shift=0.2, seed=3)


@pytest.fixture
def tiny_data(tiny_spec):
    return generate_dataset(tiny_spec)


@pytest.fixture
def small_model_config():
    return ModelConfig(input_dim=12, hidden_dims=[8], embed_dim=6, activation="relu", init_seed=0)


@pytest.fixture
def quick_train_config():
    return TrainConfig(epochs=4, warmup_epochs=2, batch_size=16, lr=0.05, lr_decay_epochs=[3],
                       prototype_regen_epochs=[2], arcface=ArcFaceParams(scale=16.0, margin=0.2),
                       loss_spec=CompatLossSpec(arcface=ArcFaceParams(scale=16.0, margin=0.2)),
                       seed=5, progress=False)
