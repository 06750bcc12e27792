"""
Test configuration and fixtures for the SMC simulator test suite.

This module provides pytest fixtures for configuration, hardware profiles,
toy network descriptors and temporary output locations.
"""

import json
import os
import logging

import pytest

logger = logging.getLogger(__name__)

# Set testing environment before importing application modules
os.environ['APP_ENV'] = 'testing'

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
NETWORKS_DIR = os.path.join(ROOT, 'networks')
CONFIG_DIR = os.path.join(ROOT, 'configs')

from config import TestingConfig  # noqa: E402
from hardware import load_hardware_profile  # noqa: E402
from model import parse_network  # noqa: E402


def toy_descriptor(name='toy', x=12, y=10, c=3, layers=None):
    """Build a descriptor document for a small network."""
    if layers is None:
        layers = [
            {'id': 'conv1', 'kind': 'CONV', 'kernel': 3, 'padding': 1, 'out_channels': 4},
            {'id': 'relu1', 'kind': 'ACT'},
            {'id': 'pool1', 'kind': 'POOL', 'kernel': 2, 'stride': 2},
            {'id': 'fc1', 'kind': 'FC', 'out_channels': 5},
            {'id': 'prob', 'kind': 'CLASS'},
        ]
    return {'name': name, 'input': {'x': x, 'y': y, 'c': c}, 'layers': layers}


def toy_net(**kwargs):
    return parse_network(json.dumps(toy_descriptor(**kwargs)), source='<toy>')


@pytest.fixture(scope="session")
def test_config():
    """Provide test configuration pointing at the repository data."""
    TestingConfig.CONFIG_DIR = CONFIG_DIR
    TestingConfig.NETWORKS_DIR = NETWORKS_DIR
    return TestingConfig


@pytest.fixture(scope="session")
def profile(test_config):
    """The shipped paper-baseline hardware profile."""
    return load_hardware_profile(os.path.join(CONFIG_DIR, 'paper-baseline.json'))


@pytest.fixture(scope="function")
def small_net():
    """CONV -> ACT -> POOL -> FC -> CLASS on a 12x10x3 input."""
    return toy_net()


@pytest.fixture(scope="function")
def residual_net():
    """Two convolutions joined by an element-wise add, then a concat."""
    layers = [
        {'id': 'conv1', 'kind': 'CONV', 'kernel': 3, 'padding': 1, 'out_channels': 6},
        {'id': 'relu1', 'kind': 'ACT'},
        {'id': 'conv2', 'kind': 'CONV', 'kernel': 1, 'out_channels': 6, 'inputs': ['relu1']},
        {'id': 'conv3', 'kind': 'CONV', 'kernel': 3, 'padding': 1, 'out_channels': 6, 'inputs': ['relu1']},
        {'id': 'add', 'kind': 'ELTWISE_ADD', 'inputs': ['conv2', 'conv3']},
        {'id': 'relu2', 'kind': 'ACT'},
        {'id': 'branch', 'kind': 'CONV', 'kernel': 1, 'out_channels': 2, 'inputs': ['relu2']},
        {'id': 'cat', 'kind': 'CONCAT', 'inputs': ['relu2', 'branch']},
        {'id': 'pool', 'kind': 'POOL', 'kernel': 2, 'stride': 2, 'inputs': ['cat']},
    ]
    return toy_net(name='residual', x=8, y=8, c=4, layers=layers)


@pytest.fixture(scope="function")
def network_path():
    """Resolve a shipped network name to its descriptor path."""
    def resolve(name):
        return os.path.join(NETWORKS_DIR, f"{name}.json")
    return resolve


@pytest.fixture(scope="function")
def temp_output_dir(tmp_path):
    """Temporary directory for report files."""
    out = tmp_path / 'output'
    out.mkdir()
    return out


@pytest.fixture(autouse=True)
def pinned_timestamps(monkeypatch):
    """Manifests use a fixed timestamp inside the suite."""
    monkeypatch.setattr(TestingConfig, 'SOURCE_DATE_EPOCH', '0')
    yield
