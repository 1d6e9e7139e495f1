from __future__ import annotations

import os
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from aircomp_fl.core import ScenarioConfig, default_config
from aircomp_fl.data import load_mnist
from aircomp_fl.experiments import MnistSource

MNIST_DIR_ENV = "AIRCOMP_FL_MNIST_DIR"
MNIST_FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def regression_cfg() -> ScenarioConfig:
    return replace(default_config("linear_regression", "desk"), num_iterations=30)


@pytest.fixture
def mlp_cfg() -> ScenarioConfig:
    return replace(
        default_config("mlp_classifier", "desk"),
        num_iterations=4,
        eval_interval=2,
        synthetic_test_samples=200,
    )


def _find(directory: Path, stem: str) -> Path | None:
    for name in (stem, f"{stem}.gz"):
        if (directory / name).exists():
            return directory / name
    return None


@pytest.fixture(scope="session")
def mnist() -> MnistSource | None:
    """Real MNIST when AIRCOMP_FL_MNIST_DIR holds the four IDX files, else None
    (callers then fall back to synthetic digits)."""
    raw = os.environ.get(MNIST_DIR_ENV)
    if not raw:
        return None
    paths = [_find(Path(raw), stem) for stem in MNIST_FILES]
    if any(p is None for p in paths):
        return None
    train_images, train_labels, test_images, test_labels = paths
    assert train_images and train_labels and test_images and test_labels
    return MnistSource(
        load_mnist(train_images, train_labels), load_mnist(test_images, test_labels)
    )
