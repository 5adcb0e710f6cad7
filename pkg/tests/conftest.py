import logging

import numpy as np
import pytest

from commands.utils import nn_core
from commands.utils.data_synth import BenchmarkConfig, generate_benchmark
from commands.utils.trainer import TrainConfig, prepare


@pytest.fixture(autouse=True)
def reset_logging():
    yield
    logger = logging.getLogger('rpf')
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()
    logger.propagate = True


@pytest.fixture
def tiny_state() -> nn_core.ModelState:
    """3 -> 4 -> 3 tanh extractor, 3-way head, with f0 and h_lp snapshots"""

    f = nn_core.init_mlp([3, 4, 3], seed=1, activation='tanh')
    f0 = nn_core.init_mlp([3, 4, 3], seed=2, activation='tanh', stream='f0')
    h = nn_core.init_head(3, 3, seed=1)
    h_lp = nn_core.init_head(3, 3, seed=2, stream='h_lp')
    return nn_core.ModelState(f, h, f0=f0, h_lp=h_lp)


@pytest.fixture
def tiny_batch() -> nn_core.Batch:
    rng = np.random.default_rng(0)
    return nn_core.Batch(rng.normal(size=(5, 3)), np.array([0, 1, 2, 1, 0]))


@pytest.fixture
def tiny_prototypes() -> np.ndarray:
    return np.random.default_rng(1).normal(size=(3, 3))


@pytest.fixture(scope='session')
def bench_config() -> BenchmarkConfig:
    return BenchmarkConfig(input_dim=8, samples_per_class=20, pretext_samples_per_class=10)


@pytest.fixture(scope='session')
def bundle(bench_config):
    return generate_benchmark(bench_config, seed=3)


@pytest.fixture(scope='session')
def fast_config() -> TrainConfig:
    return TrainConfig(epochs=4, decay_epoch=3, lr=0.05, batch_size=16, lp_epochs=3, lp_lr=0.1,
                       pretrain_epochs=5, pretrain_lr=0.05, hidden_dims=(16,), feature_dim=8, seed=0)


@pytest.fixture(scope='session')
def prepared(bundle, fast_config):
    return prepare(bundle, fast_config)
