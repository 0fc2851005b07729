"""Pytest configuration and fixtures."""
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from kmtq import dist
from kmtq.kmt import build_coupled_sample

SRC = Path(__file__).parent.parent / "src"


@pytest.fixture
def rng():
    """Fixed-seed generator."""
    return np.random.default_rng(12345)


@pytest.fixture
def small_sample():
    """Coupled sample with n=50, uniform arrivals, gamma(2,1) services."""
    return build_coupled_sample(50, 0.7, dist.uniform01(), dist.gamma(2.0, 1.0), master_seed=7)


@pytest.fixture
def config_file(tmp_path):
    """Write a TOML experiment file and return its path."""
    def _write(text: str, name: str = "experiment.toml"):
        path = tmp_path / name
        path.write_text(text)
        return path
    return _write


def run_kmtq(*args, cwd=None, env=None, input=None):
    """Run kmtq CLI and return result."""
    if env is None:
        env = dict(os.environ)
        env["PYTHONPATH"] = os.pathsep.join(filter(None, [str(SRC), env.get("PYTHONPATH")]))
        env["PYTHONIOENCODING"] = "utf-8"
    result = subprocess.run(
        [sys.executable, "-m", "kmtq.cli", *args],
        capture_output=True,
        text=True,
        encoding="utf-8",
        cwd=cwd,
        env=env,
        input=input,
    )
    return result
