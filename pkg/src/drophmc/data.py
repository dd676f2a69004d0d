"""Dataset ingestion, label checks, mini-batching and per-batch whitening.

Two on-disk formats are supported: the big-endian IDX image/label containers
and delimited numeric feature tables (D feature columns followed by one
integer label column, no header).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .model import Batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Columns whose in-batch standard deviation falls below this are only
# centered, never divided.
DEGENERATE_STD = 1e-8


class Dataset:
    """An (N, D) feature matrix with integer labels in [0, class_count)."""

    __slots__ = ("features", "labels", "class_count", "name")

    def __init__(self, features: np.ndarray, labels: np.ndarray,
                 class_count: int, name: str = ""):
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels)
        if features.ndim != 2 or features.shape[0] == 0:
            raise ValueError("features must be a non-empty (N, D) matrix")
        if labels.shape != (features.shape[0],):
            raise ValueError(
                f"got {features.shape[0]} examples but {labels.shape} labels"
            )
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("labels must be integers")
        if class_count < 2:
            raise ValueError("class_count must be at least 2")
        if labels.min() < 0 or labels.max() >= class_count:
            raise ValueError(
                f"labels must lie in [0, {class_count}), "
                f"found range [{labels.min()}, {labels.max()}]"
            )
        if not np.isfinite(features).all():
            raise ValueError("non-finite feature values")
        self.features = features
        self.labels = labels.astype(np.int64)
        self.class_count = int(class_count)
        self.name = name

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_count(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class BatchPlan:
    """A permutation of one epoch sliced into consecutive batches."""

    batch_size: int
    permutation: np.ndarray
    bounds: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.bounds)

    def indices(self, i: int) -> np.ndarray:
        start, stop = self.bounds[i]
        return self.permutation[start:stop]


def _read_idx_header(raw: bytes, path: str, expected_magic: int) -> tuple[list[int], int]:
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    magic = int.from_bytes(raw[:4], "big")
    if magic != expected_magic:
        raise ValueError(
            f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    ndim = raw[3]
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise ValueError(f"{path}: truncated IDX dimension fields")
    dims = [
        int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)
    ]
    count = int(np.prod(dims, dtype=np.int64)) if dims else 0
    if len(raw) - header_len != count:
        raise ValueError(
            f"{path}: declared {count} bytes of data, file holds "
            f"{len(raw) - header_len}"
        )
    return dims, header_len


def load_idx_images(path: str) -> np.ndarray:
    """Load an IDX image file as an (N, rows*cols) matrix scaled to [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    dims, offset = _read_idx_header(raw, path, IDX_IMAGES_MAGIC)
    n, rows, cols = dims
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=offset)
    return pixels.reshape(n, rows * cols).astype(np.float64) / 255.0


def load_idx_labels(path: str) -> np.ndarray:
    """Load an IDX label file as an (N,) int64 vector."""
    with open(path, "rb") as fh:
        raw = fh.read()
    _, offset = _read_idx_header(raw, path, IDX_LABELS_MAGIC)
    return np.frombuffer(raw, dtype=np.uint8, offset=offset).astype(np.int64)


def load_idx_dataset(images_path: str, labels_path: str,
                     class_count: int | None = None, name: str = "") -> Dataset:
    """Assemble a Dataset from matching IDX image and label files."""
    features = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if features.shape[0] != labels.shape[0]:
        raise ValueError(
            f"{images_path} has {features.shape[0]} images but "
            f"{labels_path} has {labels.shape[0]} labels"
        )
    if class_count is None:
        class_count = int(labels.max()) + 1
    return Dataset(features, labels, class_count, name=name)


def load_feature_table(path: str, delimiter: str = ",",
                       class_count: int | None = None, name: str = "") -> Dataset:
    """Load a delimited numeric table; the last column is the integer label."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # empty files warn before we raise
            table = np.loadtxt(path, delimiter=delimiter, ndmin=2)
    except Exception as exc:  # ragged rows, non-numeric cells
        raise ValueError(f"{path}: cannot parse feature table: {exc}") from exc
    if table.size == 0:
        raise ValueError(f"{path}: empty feature table")
    if table.shape[1] < 2:
        raise ValueError(f"{path}: need at least one feature column plus labels")
    raw_labels = table[:, -1]
    if not np.equal(np.mod(raw_labels, 1), 0).all():
        raise ValueError(f"{path}: label column contains non-integers")
    labels = raw_labels.astype(np.int64)
    if labels.min() < 0:
        raise ValueError(f"{path}: negative labels")
    if class_count is None:
        class_count = int(labels.max()) + 1
    return Dataset(table[:, :-1], labels, class_count, name=name)


def whiten_batch(features: np.ndarray) -> np.ndarray:
    """Standardize each column within the batch (population std).

    Near-constant columns are centered but not divided.
    """
    features = np.asarray(features, dtype=np.float64)
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    out = features - mean
    live = std >= DEGENERATE_STD
    out[:, live] /= std[live]
    return out


def feature_stats(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Global per-column mean and population std of a dataset."""
    return dataset.features.mean(axis=0), dataset.features.std(axis=0)


def whiten_with_stats(dataset: Dataset, mean: np.ndarray, std: np.ndarray) -> Dataset:
    """Standardize with externally supplied statistics (e.g. training-set)."""
    out = dataset.features - mean
    live = std >= DEGENERATE_STD
    out[:, live] /= std[live]
    return Dataset(out, dataset.labels, dataset.class_count, name=dataset.name)


def whiten_dataset(dataset: Dataset, batch_size: int) -> Dataset:
    """Whiten sequential batches of the dataset, each with its own stats.

    This mirrors at prediction time what the training pipeline does to each
    mini-batch.
    """
    plan = make_batches(dataset, batch_size, rng=None)
    out = np.empty_like(dataset.features)
    for i in range(len(plan)):
        idx = plan.indices(i)
        out[idx] = whiten_batch(dataset.features[idx])
    return Dataset(out, dataset.labels, dataset.class_count, name=dataset.name)


def make_batches(dataset: Dataset, batch_size: int,
                 rng: np.random.Generator | None = None) -> BatchPlan:
    """Slice one epoch into batches of ``batch_size`` (last may be short).

    With ``rng`` the example order is permuted; without it the order is
    sequential (used for deterministic test-time batching).
    """
    n = len(dataset)
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
    if rng is None:
        perm = np.arange(n)
    else:
        perm = rng.permutation(n)
    bounds = tuple(
        (start, min(start + batch_size, n)) for start in range(0, n, batch_size)
    )
    return BatchPlan(batch_size, perm, bounds)


def iter_batches(dataset: Dataset, plan: BatchPlan, whiten: bool = True):
    """Materialize the plan's batches, optionally whitening each one."""
    for i in range(len(plan)):
        idx = plan.indices(i)
        features = dataset.features[idx]
        if whiten:
            features = whiten_batch(features)
        yield Batch(features, dataset.labels[idx], len(dataset))
