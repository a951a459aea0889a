"""Pytest configuration and fixtures."""

import os
import shutil
import tempfile

import django
import numpy as np
import pytest
from django.conf import settings


@pytest.fixture(scope="session", autouse=True)
def setup_django() -> None:
    """Setup Django for testing."""
    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "tests.settings")
    if not settings.configured:
        django.setup()


def pytest_configure(config: object) -> None:
    """Configure pytest and setup Django."""
    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "tests.settings")
    if not settings.configured:
        django.setup()


@pytest.fixture
def temp_output_dir() -> str:
    """Create a temporary output directory for tests."""
    temp_dir = tempfile.mkdtemp()
    yield temp_dir
    shutil.rmtree(temp_dir, ignore_errors=True)


@pytest.fixture
def mock_clipsim_settings(temp_output_dir: str, monkeypatch: pytest.MonkeyPatch) -> dict:
    """Point clipsim at a temporary output directory with small run defaults."""
    test_settings = {
        "OUTPUT_DIR": temp_output_dir,
        "WORKERS": 2,
        "RUN_DEFAULTS": {
            "tree": {"vocab_size": 3, "horizon": 2, "prompt_count": 2},
            "steps": 16,
            "rollouts_per_step": 32,
            "evaluation": {"interval": 8},
        },
    }
    monkeypatch.setattr(settings, "CLIPSIM_SETTINGS", test_settings)

    # Reload settings
    from ennam_clipsim.settings import clipsim_settings
    clipsim_settings.reload()

    yield test_settings

    # Cleanup
    clipsim_settings.reload()


@pytest.fixture
def rng() -> np.random.Generator:
    """A seeded generator."""
    return np.random.default_rng(12345)


@pytest.fixture
def small_spec():
    """Three tokens, two steps, two prompts: 8 states."""
    from ennam_clipsim.env import TreeSpec

    return TreeSpec(vocab_size=3, horizon=2, prompt_count=2)


@pytest.fixture
def oracle_spec():
    """The tree used by the gradient checks: five tokens, two steps."""
    from ennam_clipsim.env import TreeSpec

    return TreeSpec(vocab_size=5, horizon=2)


@pytest.fixture
def write_config(temp_output_dir: str):
    """Write a run config dict as YAML and return its path."""
    import yaml

    def write(data: dict, name: str = "run.yaml") -> str:
        path = os.path.join(temp_output_dir, name)
        with open(path, "w", encoding="utf-8") as handle:
            yaml.safe_dump(data, handle)
        return path

    return write
