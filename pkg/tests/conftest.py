import os
from unittest import mock

import numpy as np
import pytest

from pflalign_sim.data import ClientDataset
from pflalign_sim.models import Minibatch, ModelKind, ModelSpec


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run slow benchmark tests"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def single_worker_thread():
    with mock.patch.dict(os.environ, {"PFLALIGN_THREADS": "1"}):
        yield


@pytest.fixture
def scalar_spec():
    """f(b) = (b - a)^2 through a 1-D linear regression evaluated at x = 0."""
    return ModelSpec(kind=ModelKind.LINEAR_REGRESSION, input_dim=1, output_dim=1)


def constant_target_client(a: float, size: int = 8, client_id: int = 0) -> ClientDataset:
    """Every example has x = 0 and y = a, so the loss only depends on the bias."""
    batch = Minibatch(inputs=np.zeros((size, 1)), targets=np.full((size, 1), a))
    return ClientDataset(client_id=client_id, task_id=client_id, train=batch, test=batch)


@pytest.fixture
def target_client():
    return constant_target_client
