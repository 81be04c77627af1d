from pathlib import Path

import numpy as np
import pytest

from drfm.data_io import Checkpoint
from drfm.model import ModelMode, init_features, init_params
from drfm.schedule import default_schedule, linear_schedule

ROOT = Path(__file__).resolve().parents[1]
FMNIST = ROOT / "data" / "fashion-mnist-subset"
FMNIST_IMAGES = FMNIST / "images-idx3-ubyte"
FMNIST_LABELS = FMNIST / "labels-idx1-ubyte"


@pytest.fixture
def schedule():
    return default_schedule()


@pytest.fixture
def small_schedule():
    return linear_schedule(1e-3, 0.2, 6)


def make_checkpoint(d=3, n=8, K=6, seed=0, mode=ModelMode.DRFM, theta2_scale=0.3):
    sched = linear_schedule(1e-3, 0.2, K)
    features = init_features(d, n, seed=seed)
    params = init_params(K, n, d, mode, seed=seed)
    params.theta2 = np.random.default_rng(seed).normal(0.0, theta2_scale, (n, d))
    return Checkpoint(mode=mode, betas=sched.betas.copy(), W=features.W, b=features.b,
                      theta1=params.theta1, theta2=params.theta2, seed=seed, epochs=0)


@pytest.fixture
def tiny_checkpoint():
    return make_checkpoint()
