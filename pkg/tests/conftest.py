import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from fgdi.pipeline import StagePlan, TrainConfig, train
from fgdi.synthdata import DataConfig, build_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_config() -> DataConfig:
    return DataConfig(seed=0, num_domains=3, heldout_domain=2,
                      pids_per_domain=6, images_per_pid=4)


@pytest.fixture(scope="session")
def tiny_split(tiny_config):
    return build_dataset(tiny_config)


@pytest.fixture(scope="session")
def micro_train_cfg() -> TrainConfig:
    return TrainConfig(plan=StagePlan(2, 2, 2, 2), P=4, K=3, seed=0)


@pytest.fixture(scope="session")
def micro_model(tiny_split, micro_train_cfg):
    model, log = train(micro_train_cfg, tiny_split)
    return model, log


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(42)
