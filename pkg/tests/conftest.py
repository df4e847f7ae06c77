"""
Shared pytest fixtures for the weakcat test suite.
"""

import os
import sys
from typing import Sequence

import numpy as np
import pytest

# Add the repository root to path for `from src.<module> import ...`
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from src.config import PreprocessConfig  # noqa: E402
from src.corpus import TrainingSample  # noqa: E402


def make_sample(record_id: str, labels: Sequence[int], features=(1.0, 0.0), item_id: str = "") -> TrainingSample:
    return TrainingSample(
        record_id=record_id,
        item_id=item_id or f"item-{record_id}",
        image_input=np.asarray(features, dtype=np.float64),
        labels=tuple(sorted(set(labels))),
    )


@pytest.fixture
def preprocess_config():
    """Bundled stopwords and blacklist, default vocabulary size."""
    return PreprocessConfig()


@pytest.fixture
def clean_env(monkeypatch):
    """Single worker thread regardless of the caller's environment."""
    monkeypatch.delenv("WEAKCAT_THREADS", raising=False)


@pytest.fixture
def run_cli(tmp_path, clean_env):
    """Invoke the CLI in-process with a throwaway artifact registry."""
    from src.cli import main

    registry = tmp_path / "registry.db"

    def run(*argv: str) -> int:
        return main(["--registry", str(registry), *map(str, argv)])

    run.registry_path = registry
    return run
