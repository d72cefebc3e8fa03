"""Shared fixtures: tiny networks, tiny synthetic domains, throwaway run dirs."""

import numpy as np
import pytest

from engine.config import DivergenceConfig, DivergenceKind, preset_config
from sources.synthetic import desk_domains

TINY_SIZE = 16


@pytest.fixture(autouse=True)
def isolated_dirs(tmp_path, monkeypatch):
    """Keep every cache and run directory inside the test's tmp dir."""
    monkeypatch.setenv("DENSITYMATCH_DATA_DIR", str(tmp_path / "data"))
    monkeypatch.setenv("DENSITYMATCH_RUNS_DIR", str(tmp_path / "runs"))
    return tmp_path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """smoke preset cut down to one split and one epoch, whole target set."""
    return preset_config("smoke", num_splits="1", epochs="1", target_fraction="1.0")


@pytest.fixture
def jsd_config(tiny_config):
    return tiny_config.with_changes(divergence=DivergenceConfig(kind=DivergenceKind.JSD, weight=0.01).model_dump())


@pytest.fixture(scope="session")
def tiny_domains():
    """10 labeled source images and 6 shifted target images, 16×16."""
    return desk_domains(source_count=10, target_count=6, image_size=TINY_SIZE, seed=3)


@pytest.fixture
def source(tiny_domains):
    return tiny_domains[0]


@pytest.fixture
def target(tiny_domains):
    return tiny_domains[1]
