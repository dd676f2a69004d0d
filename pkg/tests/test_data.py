import numpy as np
import pytest
from numpy.testing import assert_allclose

from drophmc.data import (
    Dataset,
    iter_batches,
    load_feature_table,
    load_idx_dataset,
    load_idx_images,
    load_idx_labels,
    make_batches,
    whiten_batch,
    whiten_dataset,
    feature_stats,
    whiten_with_stats,
)


def write_idx_images(path, images):
    """Serialize a (N, rows, cols) uint8 array in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write((0x00000803).to_bytes(4, "big"))
        for dim in (n, rows, cols):
            fh.write(dim.to_bytes(4, "big"))
        fh.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write((0x00000801).to_bytes(4, "big"))
        fh.write(len(labels).to_bytes(4, "big"))
        fh.write(labels.tobytes())


@pytest.fixture
def idx_pair(tmp_path):
    images = np.array(
        [[[0, 255], [128, 64]], [[255, 0], [1, 2]]], dtype=np.uint8
    )
    labels = np.array([3, 7], dtype=np.uint8)
    img_path = tmp_path / "imgs.idx"
    lbl_path = tmp_path / "lbls.idx"
    write_idx_images(img_path, images)
    write_idx_labels(lbl_path, labels)
    return str(img_path), str(lbl_path), images, labels


class TestIdxLoading:
    def test_pixel_scaling(self, idx_pair):
        img_path, _, images, _ = idx_pair
        out = load_idx_images(img_path)
        assert out.shape == (2, 4)
        assert_allclose(out[0], [0.0, 1.0, 128 / 255, 64 / 255])

    def test_labels(self, idx_pair):
        _, lbl_path, _, labels = idx_pair
        assert (load_idx_labels(lbl_path) == [3, 7]).all()

    def test_round_trip_bytes(self, idx_pair, tmp_path):
        img_path, lbl_path, images, labels = idx_pair
        loaded = load_idx_images(img_path)
        rewritten = tmp_path / "again.idx"
        write_idx_images(
            rewritten,
            np.round(loaded * 255).astype(np.uint8).reshape(images.shape),
        )
        assert rewritten.read_bytes() == open(img_path, "rb").read()

        reloaded_labels = load_idx_labels(lbl_path)
        relabeled = tmp_path / "lbl_again.idx"
        write_idx_labels(relabeled, reloaded_labels)
        assert relabeled.read_bytes() == open(lbl_path, "rb").read()

    def test_bad_magic(self, idx_pair):
        img_path, lbl_path, _, _ = idx_pair
        with pytest.raises(ValueError, match="magic"):
            load_idx_images(lbl_path)
        with pytest.raises(ValueError, match="magic"):
            load_idx_labels(img_path)

    def test_truncated_file(self, tmp_path, idx_pair):
        img_path = idx_pair[0]
        raw = open(img_path, "rb").read()
        short = tmp_path / "short.idx"
        short.write_bytes(raw[:-3])
        with pytest.raises(ValueError, match="declared"):
            load_idx_images(str(short))

    def test_count_mismatch_at_assembly(self, tmp_path, idx_pair):
        img_path = idx_pair[0]
        lonely = tmp_path / "one_label.idx"
        write_idx_labels(lonely, np.array([1], dtype=np.uint8))
        with pytest.raises(ValueError, match="label"):
            load_idx_dataset(img_path, str(lonely))

    def test_dataset_assembly(self, idx_pair):
        img_path, lbl_path, _, _ = idx_pair
        ds = load_idx_dataset(img_path, lbl_path, class_count=10)
        assert len(ds) == 2
        assert ds.feature_count == 4
        assert ds.class_count == 10


class TestFeatureTable:
    def test_basic(self, tmp_path):
        path = tmp_path / "table.csv"
        path.write_text("1.0,2.0,0\n0.5,0.5,1\n0,0,1\n")
        ds = load_feature_table(str(path))
        assert (len(ds), ds.feature_count, ds.class_count) == (3, 2, 2)
        assert_allclose(ds.features[0], [1.0, 2.0])
        assert (ds.labels == [0, 1, 1]).all()

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(ValueError):
            load_feature_table(str(path))

    def test_ragged_rows(self, tmp_path):
        path = tmp_path / "ragged.csv"
        path.write_text("1,2,0\n1,2,3,0\n")
        with pytest.raises(ValueError):
            load_feature_table(str(path))

    def test_non_numeric(self, tmp_path):
        path = tmp_path / "words.csv"
        path.write_text("1,apple,0\n")
        with pytest.raises(ValueError):
            load_feature_table(str(path))

    def test_negative_labels(self, tmp_path):
        path = tmp_path / "neg.csv"
        path.write_text("1,2,-1\n")
        with pytest.raises(ValueError):
            load_feature_table(str(path))

    def test_fractional_labels(self, tmp_path):
        path = tmp_path / "frac.csv"
        path.write_text("1,2,0.5\n")
        with pytest.raises(ValueError, match="non-integer"):
            load_feature_table(str(path))

    def test_alternate_delimiter_and_class_count(self, tmp_path):
        path = tmp_path / "tabs.tsv"
        path.write_text("1\t2\t0\n3\t4\t2\n")
        ds = load_feature_table(str(path), delimiter="\t", class_count=8)
        assert ds.class_count == 8

    def test_wide_table(self, tmp_path):
        rng = np.random.default_rng(0)
        rows = rng.normal(size=(6, 512))
        labels = rng.integers(0, 8, size=6)
        lines = [
            ",".join(f"{v:.6f}" for v in row) + f",{lab}"
            for row, lab in zip(rows, labels)
        ]
        path = tmp_path / "wide.csv"
        path.write_text("\n".join(lines) + "\n")
        ds = load_feature_table(str(path), class_count=8)
        assert ds.feature_count == 512
        assert ds.class_count == 8


class TestWhitening:
    def test_constant_column_is_zeroed(self):
        out = whiten_batch(np.array([[2.0, 1.0], [2.0, 3.0]]))
        assert_allclose(out[:, 0], 0.0)

    def test_columns_standardized(self):
        rng = np.random.default_rng(1)
        out = whiten_batch(rng.normal(loc=3, scale=5, size=(50, 6)))
        assert_allclose(out.mean(axis=0), 0.0, atol=1e-10)
        assert_allclose(out.var(axis=0), 1.0, atol=1e-8)

    def test_hand_computed(self):
        out = whiten_batch(np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert_allclose(out, [[-1.0, -1.0], [1.0, 1.0]])

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        once = whiten_batch(rng.normal(size=(30, 4)))
        assert_allclose(whiten_batch(once), once, atol=1e-8)

    def test_whiten_dataset_per_batch(self):
        rng = np.random.default_rng(3)
        ds = Dataset(rng.normal(loc=2, size=(10, 3)),
                     rng.integers(0, 2, size=10), 2)
        out = whiten_dataset(ds, batch_size=5)
        for chunk in (out.features[:5], out.features[5:]):
            assert_allclose(chunk.mean(axis=0), 0.0, atol=1e-10)

    def test_whiten_with_training_stats(self):
        rng = np.random.default_rng(4)
        train = Dataset(rng.normal(loc=1, scale=2, size=(40, 3)),
                        rng.integers(0, 2, size=40), 2)
        test = Dataset(rng.normal(size=(10, 3)),
                       rng.integers(0, 2, size=10), 2)
        mean, std = feature_stats(train)
        out = whiten_with_stats(test, mean, std)
        assert_allclose(out.features, (test.features - mean) / std)


class TestBatching:
    def test_exact_partition_sizes(self):
        rng = np.random.default_rng(5)
        ds = Dataset(rng.normal(size=(5, 2)), rng.integers(0, 2, size=5), 2)
        plan = make_batches(ds, 2, rng)
        sizes = [len(plan.indices(i)) for i in range(len(plan))]
        assert sizes == [2, 2, 1]

    def test_partition_is_exact_cover(self):
        rng = np.random.default_rng(6)
        ds = Dataset(rng.normal(size=(103, 2)), rng.integers(0, 3, size=103), 3)
        plan = make_batches(ds, 10, rng)
        seen = np.concatenate([plan.indices(i) for i in range(len(plan))])
        assert sorted(seen) == list(range(103))

    def test_same_seed_same_permutation(self):
        rng_a = np.random.default_rng(7)
        rng_b = np.random.default_rng(7)
        ds = Dataset(np.random.default_rng(8).normal(size=(20, 2)),
                     np.zeros(20, dtype=int), 2)
        plan_a = make_batches(ds, 6, rng_a)
        plan_b = make_batches(ds, 6, rng_b)
        assert (plan_a.permutation == plan_b.permutation).all()

    def test_batch_too_large(self):
        ds = Dataset(np.ones((3, 2)), np.zeros(3, dtype=int), 2)
        with pytest.raises(ValueError):
            make_batches(ds, 4)

    def test_iter_batches_carries_dataset_size(self):
        rng = np.random.default_rng(9)
        ds = Dataset(rng.normal(size=(12, 2)), rng.integers(0, 2, size=12), 2)
        plan = make_batches(ds, 5, rng)
        batches = list(iter_batches(ds, plan, whiten=False))
        assert [len(b) for b in batches] == [5, 5, 2]
        assert all(b.dataset_size == 12 for b in batches)

    def test_whitened_batches(self):
        rng = np.random.default_rng(10)
        ds = Dataset(rng.normal(loc=4, size=(12, 3)),
                     rng.integers(0, 2, size=12), 2)
        plan = make_batches(ds, 6, rng)
        for batch in iter_batches(ds, plan):
            assert_allclose(batch.features.mean(axis=0), 0.0, atol=1e-10)
