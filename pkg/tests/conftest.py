import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from core.attacks import AttackConfig
from core.datagen import DatasetSpec, generate_dataset
from core.losses import LossConfig
from core.models import ModelConfig, PartModel, init_params
from core.trainer import TrainConfig, train


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow trend reproductions')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope='session')
def tiny_spec():
    return DatasetSpec(C=2, K=6, H=16, W=16, n_train=48, n_val=16, n_test=16, seed=3)


@pytest.fixture(scope='session')
def tiny_data(tiny_spec):
    return generate_dataset(tiny_spec)


def tiny_model_config(**overrides):
    base = dict(K=6, C=2, H=16, W=16, width=2, head_channels=2, head_hidden=8,
                bbox_hidden=(8, 8), two_headed_hidden=8, pool=2, seed=0)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    config = tiny_model_config()
    return PartModel(config, init_params(config))


def tiny_train_config(**overrides):
    base = dict(
        model=tiny_model_config(),
        loss=LossConfig(kind='normal', c_seg=0.5),
        attack=AttackConfig(epsilon=4 / 255, iterations=2),
        eval_attack=AttackConfig(epsilon=4 / 255, iterations=2),
        lr0=0.05, batch_size=16, pretrain_epochs=2, train_epochs=0, select_on='clean', seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope='session')
def trained_toy(tiny_data):
    """A briefly trained part model on the tiny dataset"""
    result = train(tiny_train_config(pretrain_epochs=4), tiny_data)
    return result.best.model()
