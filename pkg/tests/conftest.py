import os

import numpy as np
import pytest

from drophmc.data import Dataset

MNIST_DIR = os.environ.get("DROPHMC_MNIST", "/root/data/mnist")
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

_acceptance_lines: list[str] = []


def record_criterion(name: str, passed: bool, detail: str):
    """Collect one acceptance line; echoed at the end of the pytest run."""
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    _acceptance_lines.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def mnist_paths():
    paths = {k: os.path.join(MNIST_DIR, v) for k, v in MNIST_FILES.items()}
    missing = [p for p in paths.values() if not os.path.exists(p)]
    if missing:
        pytest.skip(
            f"MNIST IDX files not found under {MNIST_DIR} "
            "(set DROPHMC_MNIST to their directory)"
        )
    return paths


def _draw_clusters(rng, centers, per_class, spread, class_count):
    features = np.concatenate([
        centers[k] + rng.normal(scale=spread,
                                size=(per_class, centers.shape[1]))
        for k in range(class_count)
    ])
    labels = np.repeat(np.arange(class_count), per_class)
    order = rng.permutation(len(labels))
    return Dataset(features[order], labels[order].astype(np.int64),
                   class_count, name="clusters")


def gaussian_clusters(class_count: int, feature_count: int, per_class: int,
                      seed: int, spread: float = 1.0,
                      separation: float = 3.0) -> Dataset:
    """Synthetic linearly separable-ish dataset with Gaussian class blobs."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=separation, size=(class_count, feature_count))
    return _draw_clusters(rng, centers, per_class, spread, class_count)


def cluster_pair(class_count: int, feature_count: int, train_per_class: int,
                 test_per_class: int, seed: int, spread: float = 1.0,
                 separation: float = 3.0) -> tuple[Dataset, Dataset]:
    """Train/test datasets drawn around one shared set of class centers."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=separation, size=(class_count, feature_count))
    train = _draw_clusters(rng, centers, train_per_class, spread, class_count)
    test = _draw_clusters(rng, centers, test_per_class, spread, class_count)
    return train, test


@pytest.fixture
def toy_dataset():
    return gaussian_clusters(3, 4, per_class=20, seed=11)
