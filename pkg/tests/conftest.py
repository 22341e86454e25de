"""Pytest configuration and shared fixtures."""

import os
import sys

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from panoattn.config import RunConfig, load_config  # noqa: E402
from panoattn.synthetic import synth_pyramid  # noqa: E402


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    """Keep PANOATTN_* variables from the shell out of every test."""
    for var in list(os.environ):
        if var.startswith("PANOATTN_"):
            monkeypatch.delenv(var)


@pytest.fixture
def desk_config() -> RunConfig:
    return RunConfig.from_dict(load_config(profile="desk"))


@pytest.fixture
def paper_config() -> RunConfig:
    return RunConfig.from_dict(load_config(profile="paper"))


@pytest.fixture
def desk_layout(desk_config):
    return desk_config.layout


@pytest.fixture
def desk_pyramid(desk_config):
    return synth_pyramid(desk_config, desk_config.seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
