import os
import sys
from pathlib import Path

import pytest

# Keep tests offline and quiet regardless of the developer's .env
os.environ.setdefault("SENTRY_ENABLED", "false")
os.environ.setdefault("LLM_API_KEY", "test-key")

# Make sure project root is on sys.path for module resolution
PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from app.models.schemas import StrategyId  # noqa: E402  # imported after path setup
from tests.scenarios import (  # noqa: E402
    buggy_agent,
    good_agent,
    mug_config,
    mug_factory,
    scripted_judge,
)


@pytest.fixture
def factory():
    """Fresh mug-world environments with a cap of 8 steps."""
    return mug_factory(step_cap=8)


@pytest.fixture
def react_config():
    return mug_config(StrategyId.REACT, step_cap=8)


@pytest.fixture
def modular_config():
    return mug_config(StrategyId.MODULAR, step_cap=8)


@pytest.fixture
def agent():
    """Agent that walks to the wrong cabinet unless its prompt carries feedback."""
    return buggy_agent()


@pytest.fixture
def solver():
    return good_agent()


@pytest.fixture
def judge():
    return scripted_judge()


@pytest.fixture
def data_dir(tmp_path):
    """Scratch directory for files written by a test."""
    path = tmp_path / "data"
    path.mkdir()
    return path
