"""
Marle BGK - Test Fixtures

Provides shared fixtures for all tests including:
- Tiny and small phase grids with relaxed tail tolerances
- Global equilibrium backgrounds and the linearised operator
- Counter-based random generators
- Config-file helpers for the command line
"""
import json
import logging
import os
import sys

import numpy as np
import pytest

# Add repository root to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from marle_bgk import config as settings_module
from marle_bgk.schemas import GridSpec
from marle_bgk.services.distributions import build_background
from marle_bgk.services.linear_analysis import LinearizedOperator
from marle_bgk.services.phase_grid import build_grid


# ============================================
# GRID FIXTURES
# ============================================

@pytest.fixture(scope="session")
def tiny_spec():
    """6^3 x 4 nodes, 8 cells: fast enough for time integration tests."""
    return GridSpec(D=2.0, p_max=14.0, n_p=6, I_max=14.0, n_I=4, n_x=8, tail_tol=1e-6)


@pytest.fixture(scope="session")
def small_spec():
    """8^3 x 6 nodes for quadrature-sensitive checks."""
    return GridSpec(D=2.0, p_max=14.0, n_p=8, I_max=14.0, n_I=6, n_x=8, tail_tol=1e-6)


@pytest.fixture(scope="session")
def tiny_grid(tiny_spec):
    return build_grid(tiny_spec)


@pytest.fixture(scope="session")
def small_grid(small_spec):
    return build_grid(small_spec)


@pytest.fixture(scope="session")
def tiny_bg(tiny_grid):
    """Global equilibrium F0 on the tiny grid."""
    return build_background(tiny_grid)


@pytest.fixture(scope="session")
def small_bg(small_grid):
    return build_background(small_grid)


@pytest.fixture(scope="session")
def tiny_operator(tiny_bg):
    """Linearised operator around F0 on the tiny grid."""
    return LinearizedOperator(tiny_bg)


@pytest.fixture(scope="session")
def small_operator(small_bg):
    return LinearizedOperator(small_bg)


# ============================================
# RANDOMNESS
# ============================================

@pytest.fixture
def rng():
    """Philox generator with a fixed key; every test gets a fresh stream."""
    return np.random.Generator(np.random.Philox(key=1234))


# ============================================
# ENVIRONMENT & CLI HELPERS
# ============================================

@pytest.fixture(autouse=True)
def isolated_environment(monkeypatch, tmp_path):
    """Run every test from an empty directory with fresh settings and log handlers."""
    monkeypatch.chdir(tmp_path)
    for key in ("MARLE_ENVIRONMENT", "MARLE_LOG_LEVEL", "MARLE_SENTRY_DSN"):
        monkeypatch.delenv(key, raising=False)
    settings_module.reset_settings()
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)
    settings_module.reset_settings()


@pytest.fixture
def write_config(tmp_path):
    """Write a config document to a JSON file and return its path."""
    def _write(data, name="config.json"):
        path = tmp_path / name
        if hasattr(data, "model_dump"):
            data = data.model_dump(mode="json")
        path.write_text(json.dumps(data))
        return path
    return _write
