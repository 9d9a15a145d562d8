import sys
import os

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import pytest

from src.grid.grid_io import load_network

FIXTURES = os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'fixtures'))
CONFIG = os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'config', 'voltcoord_config.json'))


def pytest_configure(config):
    config.addinivalue_line("markers", "integration: mark test as an end-to-end scenario run")
    config.addinivalue_line("markers", "slow: mark test as a randomized or exhaustive search")


@pytest.fixture
def fixture_path():
    def path(name):
        return os.path.join(FIXTURES, name)
    return path


@pytest.fixture
def config_path():
    return CONFIG


@pytest.fixture
def two_bus_net():
    return load_network(os.path.join(FIXTURES, "two_bus.json"))


@pytest.fixture
def lv_net():
    return load_network(os.path.join(FIXTURES, "lv_recoverable.json"))


@pytest.fixture
def mv_net():
    return load_network(os.path.join(FIXTURES, "mv_two_substations.json"))
