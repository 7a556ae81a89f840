import numpy as np
import pytest
from loguru import logger

from phagesde.config import reset_config
from phagesde.integrate import GridConfig, InitialCondition
from phagesde.model import ModelParams, hypothesis1_region


@pytest.fixture(autouse=True)
def isolated_env(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    for name in ("PHAGE_SDE_THREADS", "PHAGE_SDE_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)
    assert not (tmp_path / ".env").exists()
    yield
    reset_config()
    # the CLI binds a sink to the stderr of the run that configured it
    logger.remove()


@pytest.fixture
def params() -> ModelParams:
    return ModelParams.reference()


@pytest.fixture
def h1_init(params) -> InitialCondition:
    """Constant history inside the non-delayed invariant region."""
    bound = hypothesis1_region(params).s_range[1]
    return InitialCondition.constant(S0=0.9 * bound, Q0=0.6)


@pytest.fixture
def short_grid() -> GridConfig:
    return GridConfig(dt=1e-3, t_end=1.0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)
