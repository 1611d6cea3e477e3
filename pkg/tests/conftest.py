import logging

import pytest
import torch

from leapd.config import RunConfig
from leapd.datasets import make_domain_split

TRAIN_DOMAINS = [("low", "front", "day"), ("high", "bird", "day")]
HELDOUT_DOMAINS = [("medium", "side", "night")]


@pytest.fixture(autouse=True)
def _double_default():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING, logger="leapd")


@pytest.fixture(scope="session")
def tiny_split():
    return make_domain_split(TRAIN_DOMAINS, HELDOUT_DOMAINS, per_domain=6, seed=3, heldout_per_domain=4)


@pytest.fixture
def tiny_config():
    return RunConfig(epochs=1, batch_size=4)
