import time

import pytest
import torch

from mosaicprune.schedule import build_schedule
from mosaicprune.toydiffusion import Denoiser, ModelConfig, TrainConfig, make_blob_dataset, train

TRAIN_SIZE = 8192
TRAIN_EPOCHS = 30


@pytest.fixture(scope="session")
def schedule():
    return build_schedule("linear", 1000)


@pytest.fixture(scope="session")
def train_data():
    return make_blob_dataset(TRAIN_SIZE, seed=0)


@pytest.fixture(scope="session")
def training_run(schedule, train_data):
    """Toy denoiser trained once per session (about three minutes on one CPU core)."""
    torch.manual_seed(0)
    model = Denoiser(ModelConfig())
    start = time.perf_counter()
    model, log = train(model, train_data, schedule, TrainConfig(epochs=TRAIN_EPOCHS, seed=0))
    return model, log, time.perf_counter() - start


@pytest.fixture(scope="session")
def trained(training_run):
    return training_run[:2]


@pytest.fixture
def tiny_model():
    torch.manual_seed(123)
    cfg = ModelConfig(d_model=16, n_heads=2, depth=2, mlp_ratio=2)
    return Denoiser(cfg).eval()
