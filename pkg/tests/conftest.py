"""Test configuration and fixtures."""

import os
import tempfile
from pathlib import Path
from typing import Callable, Generator

import numpy as np
import pytest

from taxis_lab import database
from taxis_lab.database import DatabaseManager
from taxis_lab.grid import GridSpec, ScalarField
from taxis_lab.model import InitialData, ModelParams, prepare_initial_data

# Homogeneous smoke run: every audit holds with room to spare.
SMOKE_CONFIG = """\
# homogeneous logistic run
grid.nx = 4
grid.ny = 4
model.l = 2
model.eps = 0.01
init.u.kind = constant
init.u.value = 0.5
init.v.kind = constant
init.v.value = 1
run.T = 0.5
run.samples = 11
"""


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch: pytest.MonkeyPatch) -> Generator[None, None, None]:
    """Isolate every test from process settings and the global registry."""
    for name in ("DGT_OUT", "DATABASE_PATH", "DGT_JOBS", "LOG_LEVEL", "LOG_FILE"):
        monkeypatch.delenv(name, raising=False)
    database.reset_db_manager()
    yield
    database.reset_db_manager()


@pytest.fixture
def temp_db() -> Generator[str, None, None]:
    """Create a temporary database for testing."""
    # Create a temp file but don't open it, just get the path
    fd, tmp_path = tempfile.mkstemp(suffix=".db")
    os.close(fd)

    yield tmp_path

    # Cleanup
    if os.path.exists(tmp_path):
        os.unlink(tmp_path)


@pytest.fixture
def db_manager(temp_db: str) -> DatabaseManager:
    """Create a database manager with temporary database for database tests."""
    return DatabaseManager(database_path=temp_db)


@pytest.fixture
def sample_run_data() -> dict:
    """Sample run record data for testing."""
    return {"run_id": "0123456789ab", "eps": 0.01, "nx": 16, "ny": 16, "output_dir": "out/runs/0123456789ab"}


@pytest.fixture
def small_grid() -> GridSpec:
    return GridSpec(8, 8)


@pytest.fixture
def random_positive(small_grid: GridSpec) -> Callable[[int], ScalarField]:
    """Factory of seeded random fields in ``[0.5, 1.5]``."""

    def make(seed: int) -> ScalarField:
        rng = np.random.default_rng(seed)
        return ScalarField(small_grid, rng.uniform(0.5, 1.5, size=small_grid.shape), positive=True)

    return make


def homogeneous_data(grid: GridSpec, u0: float, v0: float, l: float = 2.0) -> InitialData:
    return prepare_initial_data(ScalarField.constant(grid, u0), ScalarField.constant(grid, v0), l)


@pytest.fixture
def homogeneous() -> Callable[..., InitialData]:
    return homogeneous_data


@pytest.fixture
def logistic_setup() -> tuple:
    """``(params, initial data)`` with ``u0 + eps = 0.5`` and ``v0 = 1`` on a 4x4 grid."""
    grid = GridSpec(4, 4)
    params = ModelParams(l=2.0, eps=0.01)
    return params, homogeneous_data(grid, 0.49, 1.0)


@pytest.fixture
def write_config(tmp_path: Path) -> Callable[..., Path]:
    """Write a run configuration file, appending extra lines to the smoke config."""

    def write(extra: str = "", base: str = SMOKE_CONFIG, name: str = "run.cfg") -> Path:
        path = tmp_path / name
        path.write_text(base + extra, encoding="utf-8")
        return path

    return write
