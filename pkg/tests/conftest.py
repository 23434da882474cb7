"""Shared fixtures: canonical datasets and trained models (session-scoped).

Training the reference CNN takes ~30s, so every test that needs a trained
model shares one snapshot. The datasets use the generator's default texture;
seeds are fixed so all derived numbers are reproducible.
"""

import logging

import numpy as np
import pytest

from pimnb import data, nn, noise, trainer

logging.getLogger("pimnb.calibration").setLevel(logging.ERROR)

BLOB_CLASSES = 3
BLOB_IMAGE_SIZE = 16
TRAIN_SEED = 42
TEST_SEED = 43

TRAIN_CFG = trainer.TrainConfig(epochs=30, batch_size=32, lr=0.02, schedule="cosine", seed=0)
NIT_SCALE = 0.015
NIT_CFG = trainer.TrainConfig(
    epochs=15,
    batch_size=32,
    lr=0.005,
    schedule="cosine",
    seed=1,
    noise=noise.NoiseSpec("add", NIT_SCALE, master_seed=7),
)


@pytest.fixture(scope="session")
def blob_splits():
    full = data.synthetic_blobs(512, BLOB_CLASSES, BLOB_IMAGE_SIZE, seed=TRAIN_SEED)
    train_d, val_d = data.split_train_val(full, 0.15, TRAIN_SEED)
    test_d = data.synthetic_blobs(256, BLOB_CLASSES, BLOB_IMAGE_SIZE, seed=TEST_SEED, split="test")
    return train_d, val_d, test_d


@pytest.fixture(scope="session")
def trained(blob_splits):
    train_d, val_d, _ = blob_splits
    model = nn.reference_cnn(1, BLOB_CLASSES, seed=0)
    best, report = trainer.train(model, train_d, val_d, TRAIN_CFG)
    return best, report


@pytest.fixture(scope="session")
def trained_model(trained):
    return trained[0]


@pytest.fixture(scope="session")
def clean_test_acc(trained_model, blob_splits):
    _, _, test_d = blob_splits
    return nn.evaluate(trained_model, test_d).accuracy


@pytest.fixture(scope="session")
def nit_trained(trained, blob_splits):
    train_d, val_d, _ = blob_splits
    best, report = trained
    return trainer.noise_injection_finetune(
        best, train_d, val_d, NIT_CFG, baseline_acc=report.best_val_acc
    )


def tiny_model(seed: int = 3) -> nn.Model:
    """A <500-parameter net covering conv, BN, relu, pool, flatten, linear."""
    from pimnb import rng as prng
    from pimnb.tensor import Tensor

    layers = [
        nn.Conv2d(1, 2, 3, 1, 1),
        nn.BatchNorm2d(2),
        nn.ReLU(),
        nn.MaxPool2d(2, 2),
        nn.Flatten(),
        nn.Linear(2 * 3 * 3, 3),
    ]
    g = prng.stream(seed, prng.INIT, 99)
    params = {
        0: {"weight": Tensor(g.normal(0, 0.5, (2, 1, 3, 3))), "bias": Tensor(g.normal(0, 0.1, 2))},
        5: {"weight": Tensor(g.normal(0, 0.5, (3, 18))), "bias": Tensor(g.normal(0, 0.1, 3))},
    }
    bn = {1: nn.BNStats.identity(2)}
    bn[1].gamma = g.normal(1, 0.2, 2).astype(np.float32)
    bn[1].beta = g.normal(0, 0.2, 2).astype(np.float32)
    return nn.Model(layers, params, bn)


def tiny_gap_model(seed: int = 4) -> nn.Model:
    """A <500-parameter net covering conv, BN, relu, global-avg-pool, linear."""
    from pimnb import rng as prng
    from pimnb.tensor import Tensor

    layers = [
        nn.Conv2d(1, 3, 3, 2, 0, has_bias=False),
        nn.BatchNorm2d(3),
        nn.ReLU(),
        nn.GlobalAvgPool(),
        nn.Flatten(),
        nn.Linear(3, 2),
    ]
    g = prng.stream(seed, prng.INIT, 98)
    params = {
        0: {"weight": Tensor(g.normal(0, 0.5, (3, 1, 3, 3)))},
        5: {"weight": Tensor(g.normal(0, 0.5, (2, 3))), "bias": Tensor(g.normal(0, 0.1, 2))},
    }
    bn = {1: nn.BNStats.identity(3)}
    bn[1].gamma = g.normal(1, 0.2, 3).astype(np.float32)
    bn[1].beta = g.normal(0, 0.2, 3).astype(np.float32)
    return nn.Model(layers, params, bn)
