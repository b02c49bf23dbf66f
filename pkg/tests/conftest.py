"""
Shared fixtures: a tiny network with non-zero adapters and toy datasets
"""

import pytest

from laplace_lora.data import Split
from tests.helpers import perturbed_net, toy_dataset


@pytest.fixture
def net():
    return perturbed_net()


@pytest.fixture
def data():
    return toy_dataset()


@pytest.fixture
def val_data():
    return toy_dataset(n=9, seed=1, split=Split.VAL)


@pytest.fixture
def test_data():
    return toy_dataset(n=9, seed=2, split=Split.TEST)
