"""Tests for datasets, file loaders and batching."""

import gzip
import struct

import numpy as np
import pytest

from memorized_batchnorm.data import (
    IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
    Dataset,
    batches,
    drift_direction,
    drift_stream,
    feature_moments,
    gen_blobs,
    load_csv,
    load_dataset,
    load_idx,
    standardize_features,
    write_idx,
)
from memorized_batchnorm.errors import ArgumentError, DomainError, FormatError
from memorized_batchnorm.models import DataConfig


def idx_bytes(magic: int, dims: list[int], payload: bytes) -> bytes:
    return struct.pack(f">I{len(dims)}I", magic, *dims) + payload


@pytest.fixture
def idx_pair(tmp_path):
    """Four 2x2 images with labels 0..3."""
    pixels = bytes(range(0, 16 * 16, 16))
    images = tmp_path / "images.idx"
    labels = tmp_path / "labels.idx"
    images.write_bytes(idx_bytes(IDX_IMAGES_MAGIC, [4, 2, 2], pixels))
    labels.write_bytes(idx_bytes(IDX_LABELS_MAGIC, [4], bytes([0, 1, 2, 3])))
    return images, labels


def toy_dataset(n: int = 10) -> Dataset:
    return Dataset(features=np.arange(n, dtype=np.float64)[:, None], labels=np.zeros(n, dtype=np.int64), num_classes=1)


class TestBatches:
    """Test seeded epoch batching."""

    def test_batch_sizes(self):
        assert [len(x) for x, _ in batches(toy_dataset(), 3, seed=0)] == [3, 3, 3, 1]

    def test_drop_last(self):
        assert [len(x) for x, _ in batches(toy_dataset(), 3, seed=0, drop_last=True)] == [3, 3, 3]

    def test_partition(self):
        seen = np.concatenate([x[:, 0] for x, _ in batches(toy_dataset(), 4, seed=7)])
        np.testing.assert_array_equal(np.sort(seen), np.arange(10.0))

    def test_deterministic_per_epoch(self):
        first = [x[:, 0].tolist() for x, _ in batches(toy_dataset(), 4, seed=7, epoch=2)]
        again = [x[:, 0].tolist() for x, _ in batches(toy_dataset(), 4, seed=7, epoch=2)]
        other = [x[:, 0].tolist() for x, _ in batches(toy_dataset(), 4, seed=7, epoch=3)]
        assert first == again
        assert first != other

    def test_unshuffled(self):
        out = batches(toy_dataset(), 5, seed=0, shuffle=False)
        np.testing.assert_array_equal(out[0][0][:, 0], np.arange(5.0))

    def test_empty_epoch(self):
        with pytest.raises(DomainError):
            batches(toy_dataset(), 11, seed=0, drop_last=True)

    def test_oversized_batch_without_drop(self):
        assert [len(x) for x, _ in batches(toy_dataset(), 11, seed=0)] == [10]

    def test_invalid_batch_size(self):
        with pytest.raises(ArgumentError):
            batches(toy_dataset(), 0, seed=0)


class TestBlobs:
    """Test the synthetic Gaussian-blob generator."""

    def test_shapes_and_labels(self):
        data = gen_blobs(1, n_per_class=5, num_classes=3, dim=4)
        assert data.features.shape == (15, 4)
        assert np.bincount(data.labels).tolist() == [5, 5, 5]

    def test_deterministic(self):
        a = gen_blobs(3, 4, 2, 3)
        b = gen_blobs(3, 4, 2, 3)
        np.testing.assert_array_equal(a.features, b.features)

    def test_splits_differ(self):
        train = gen_blobs(3, 4, 2, 3, split="train")
        test = gen_blobs(3, 4, 2, 3, split="test")
        assert not np.array_equal(train.features, test.features)

    def test_drift_translates_groups(self):
        still = gen_blobs(0, 32, 2, 4, drift_per_batch=0.0)
        moving = gen_blobs(0, 32, 2, 4, drift_per_batch=0.5, drift_batch_size=16)
        shift = (moving.features - still.features) @ drift_direction(4)
        np.testing.assert_allclose(shift[:16], 0.0, atol=1e-12)
        np.testing.assert_allclose(shift[16:32], 0.5)
        np.testing.assert_allclose(shift[48:], 1.5)

    def test_negative_drift(self):
        with pytest.raises(ArgumentError):
            gen_blobs(0, 2, 2, 2, drift_per_batch=-1.0)


class TestDriftStream:
    """Test the benchmark batch stream."""

    def test_true_mean_moves(self):
        stream = list(drift_stream(np.random.default_rng(0), 8, 3, 4, drift_per_batch=1.0))
        assert len(stream) == 3
        step = stream[1][1] - stream[0][1]
        assert np.linalg.norm(step) == pytest.approx(1.0)
        np.testing.assert_array_equal(stream[0][2], np.ones(4))

    def test_sample_mean_close_to_truth(self):
        ((batch, true_mean, _),) = drift_stream(np.random.default_rng(1), 20000, 1, 2, scale=2.0)
        np.testing.assert_allclose(batch.mean(axis=0), true_mean, atol=0.1)
        np.testing.assert_allclose(batch.var(axis=0), [4.0, 4.0], rtol=0.05)


class TestIdx:
    """Test the IDX reader and writer."""

    def test_read(self, idx_pair):
        data = load_idx(*idx_pair)
        assert data.features.shape == (4, 1, 2, 2)
        assert data.labels.tolist() == [0, 1, 2, 3]
        assert data.features[0, 0, 0, 1] == pytest.approx(16 / 255)
        assert data.num_classes == 10

    def test_gzipped(self, idx_pair, tmp_path):
        images, labels = idx_pair
        gz = tmp_path / "images.idx.gz"
        with gzip.open(gz, "wb") as f:
            f.write(images.read_bytes())
        np.testing.assert_array_equal(load_idx(gz, labels).features, load_idx(images, labels).features)

    def test_bad_magic(self, idx_pair, tmp_path):
        _, labels = idx_pair
        bad = tmp_path / "bad.idx"
        bad.write_bytes(idx_bytes(0x0802, [4, 2, 2], bytes(16)))
        with pytest.raises(FormatError, match="magic"):
            load_idx(bad, labels)

    def test_truncated_payload(self, idx_pair, tmp_path):
        _, labels = idx_pair
        short = tmp_path / "short.idx"
        short.write_bytes(idx_bytes(IDX_IMAGES_MAGIC, [4, 2, 2], bytes(10)))
        with pytest.raises(FormatError, match="truncated"):
            load_idx(short, labels)

    def test_count_mismatch(self, idx_pair, tmp_path):
        images, _ = idx_pair
        labels = tmp_path / "three.idx"
        labels.write_bytes(idx_bytes(IDX_LABELS_MAGIC, [3], bytes([0, 1, 2])))
        with pytest.raises(FormatError, match="count mismatch"):
            load_idx(images, labels)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_idx(tmp_path / "nope", tmp_path / "nope2")

    def test_limit_and_standardize(self, idx_pair):
        data = load_idx(*idx_pair, limit=3, standardize=True)
        assert len(data) == 3
        np.testing.assert_allclose(data.features.mean(axis=0), 0.0, atol=1e-12)

    def test_write_then_read(self, idx_pair, tmp_path):
        original = load_idx(*idx_pair)
        write_idx(original, tmp_path / "w_images", tmp_path / "w_labels")
        reread = load_idx(tmp_path / "w_images", tmp_path / "w_labels")
        np.testing.assert_allclose(reread.features, original.features)
        np.testing.assert_array_equal(reread.labels, original.labels)


class TestCsv:
    """Test the CSV reader."""

    def test_read(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("x1,label,x2\n0.5,1,2.0\n-1,0,3\n", encoding="utf-8")
        data = load_csv(path)
        np.testing.assert_array_equal(data.features, [[0.5, 2.0], [-1.0, 3.0]])
        assert data.labels.tolist() == [1, 0]
        assert data.num_classes == 2

    def test_missing_label_column(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("a,b\n1,2\n", encoding="utf-8")
        with pytest.raises(FormatError):
            load_csv(path)

    def test_bad_value(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("a,label\nfoo,0\n", encoding="utf-8")
        with pytest.raises(FormatError, match=":2:"):
            load_csv(path)


class TestLoadDataset:
    """Test building the train/test pair from a config section."""

    def test_blobs(self):
        config = DataConfig(num_classes=3, n_per_class=4, test_per_class=2, dim=5)
        split = load_dataset(config, seed=1)
        assert len(split.train) == 12
        assert len(split.test) == 6
        assert split.train.sample_shape == (5,)

    def test_idx(self, idx_pair):
        images, labels = idx_pair
        config = DataConfig(
            source="idx", train_images=images, train_labels=labels, test_images=images, test_labels=labels
        )
        split = load_dataset(config, seed=0)
        assert split.train.sample_shape == (1, 2, 2)

    def test_csv_shape_mismatch(self, tmp_path):
        train = tmp_path / "train.csv"
        test = tmp_path / "test.csv"
        train.write_text("a,b,label\n1,2,0\n", encoding="utf-8")
        test.write_text("a,label\n1,0\n", encoding="utf-8")
        with pytest.raises(FormatError):
            load_dataset(DataConfig(source="csv", train_csv=train, test_csv=test, num_classes=2), seed=0)

    def test_standardize_uses_train_moments(self, tmp_path):
        train = tmp_path / "train.csv"
        test = tmp_path / "test.csv"
        train.write_text("a,label\n0,0\n2,1\n4,0\n", encoding="utf-8")
        test.write_text("a,label\n10,0\n12,1\n", encoding="utf-8")
        config = DataConfig(source="csv", train_csv=train, test_csv=test, num_classes=2, standardize=True)
        split = load_dataset(config, seed=0)
        std = np.sqrt(8.0 / 3.0)
        np.testing.assert_allclose(split.train.features[:, 0], [-2.0 / std, 0.0, 2.0 / std])
        np.testing.assert_allclose(split.test.features[:, 0], [8.0 / std, 10.0 / std])

    def test_standardize_blobs(self):
        config = DataConfig(num_classes=3, n_per_class=20, test_per_class=10, dim=4)
        raw = load_dataset(config, seed=2)
        split = load_dataset(config.model_copy(update={"standardize": True}), seed=2)
        moments = feature_moments(raw.train.features)
        np.testing.assert_allclose(split.train.features.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(split.test.features, standardize_features(raw.test.features, moments))

    def test_drift_groups_follow_batch_size(self):
        still = load_dataset(DataConfig(num_classes=2, n_per_class=16, dim=4), seed=0)
        drifting = DataConfig(num_classes=2, n_per_class=16, dim=4, drift_per_batch=0.5)
        moving = load_dataset(drifting, seed=0, drift_batch_size=8)
        shift = (moving.train.features - still.train.features) @ drift_direction(4)
        np.testing.assert_allclose(shift, np.repeat([0.0, 0.5, 1.0, 1.5], 8), atol=1e-12)
        np.testing.assert_array_equal(moving.test.features, still.test.features)


class TestStandardize:
    """Test per-feature standardization."""

    def test_own_moments(self):
        x = np.array([[1.0, 5.0], [3.0, 5.0]])
        np.testing.assert_allclose(standardize_features(x), [[-1.0, 0.0], [1.0, 0.0]])

    def test_constant_feature_keeps_unit_scale(self):
        _, std = feature_moments(np.array([[2.0, 1.0], [2.0, 3.0]]))
        np.testing.assert_array_equal(std, [[1.0, 1.0]])

    def test_given_moments(self):
        moments = (np.array([[1.0]]), np.array([[2.0]]))
        np.testing.assert_allclose(standardize_features(np.array([[5.0], [-1.0]]), moments), [[2.0], [-1.0]])
