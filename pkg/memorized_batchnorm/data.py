"""Datasets: Gaussian blobs with optional drift, IDX and CSV loaders, seeded batching."""

import csv
import gzip
import logging
import struct
from collections.abc import Iterator
from enum import IntEnum
from pathlib import Path
from typing import BinaryIO

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ArgumentError, DomainError, FormatError
from .models import DataConfig
from .tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
LABEL_COLUMN = "label"


class Stream(IntEnum):
    """Named random sub-streams derived from the single run seed."""

    DATA = 0
    INIT = 1
    SHUFFLE = 2
    CENTERS = 3
    BENCH = 4


def rng_for(seed: int, stream: Stream, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, int(stream), *extra])


class Dataset(BaseModel):
    """Features (N x D or N x C x H x W) with integer class labels."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    features: np.ndarray
    labels: np.ndarray
    num_classes: int = Field(ge=1)
    split: str = "train"

    @model_validator(mode="after")
    def check_consistency(self) -> "Dataset":
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.features.shape[0]} samples but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        return self

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.features.shape[1:])

    def subset(self, indices: npt.ArrayLike) -> "Dataset":
        idx = np.asarray(indices)
        return self.model_copy(update={"features": self.features[idx], "labels": self.labels[idx]})


class SplitDataset(BaseModel):
    train: Dataset
    test: Dataset


def drift_direction(dim: int) -> np.ndarray:
    """Unit vector along which drifting data translates."""
    return np.full(dim, 1.0 / np.sqrt(dim))


def blob_centers(seed: int, num_classes: int, dim: int, class_separation: float) -> np.ndarray:
    """Class means of ``gen_blobs``: standard normal draws scaled by ``class_separation``."""
    return rng_for(seed, Stream.CENTERS).normal(size=(num_classes, dim)) * class_separation


def gen_blobs(
    seed: int,
    n_per_class: int,
    num_classes: int,
    dim: int,
    class_separation: float = 3.0,
    drift_per_batch: float = 0.0,
    *,
    drift_batch_size: int = 32,
    split: str = "train",
) -> Dataset:
    """Unit-variance Gaussian clusters around ``blob_centers``.

    Samples are stored in generation order with classes interleaved. With ``drift_per_batch > 0`` the
    t-th consecutive group of ``drift_batch_size`` samples is translated by ``t * drift_per_batch``
    along ``drift_direction``. Splits share the centers and draw samples from separate streams.
    """
    if n_per_class < 1 or num_classes < 1 or dim < 1:
        raise ArgumentError(f"Sizes must be positive: n_per_class={n_per_class}, classes={num_classes}, dim={dim}")
    if drift_per_batch < 0:
        raise ArgumentError(f"drift_per_batch must be >= 0, got {drift_per_batch}")
    centers = blob_centers(seed, num_classes, dim, class_separation)
    split_id = 0 if split == "train" else 1
    rng = rng_for(seed, Stream.DATA, split_id)

    labels = np.tile(np.arange(num_classes), n_per_class)
    features = centers[labels] + rng.standard_normal((labels.size, dim))
    if drift_per_batch > 0:
        steps = np.arange(labels.size) // drift_batch_size
        features += (steps * drift_per_batch)[:, None] * drift_direction(dim)
    return Dataset(features=features, labels=labels, num_classes=num_classes, split=split)


def drift_stream(
    rng: np.random.Generator,
    batch_size: int,
    num_batches: int,
    dim: int,
    drift_per_batch: float = 0.0,
    scale: float = 1.0,
) -> Iterator[tuple[Tensor, np.ndarray, np.ndarray]]:
    """Yield ``(batch, true_mean, true_var)``; the true mean moves ``drift_per_batch`` per batch."""
    direction = drift_direction(dim)
    base = rng.normal(size=dim)
    true_var = np.full(dim, scale**2)
    for t in range(num_batches):
        true_mean = base + t * drift_per_batch * direction
        yield true_mean + scale * rng.standard_normal((batch_size, dim)), true_mean, true_var


def _open(path: Path) -> BinaryIO:
    if not path.exists():
        raise FileNotFoundError(f"IDX file not found: {path}")
    if path.suffix == ".gz":
        return gzip.open(path, "rb")  # type: ignore[return-value]
    return path.open("rb")


def _read_header(f: BinaryIO, path: Path, expected_magic: int, ndims: int) -> list[int]:
    raw = f.read(4)
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header, missing magic number")
    (magic,) = struct.unpack(">I", raw)
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    raw = f.read(4 * ndims)
    if len(raw) < 4 * ndims:
        raise FormatError(f"{path}: truncated header, missing dimension sizes")
    return list(struct.unpack(f">{ndims}I", raw))


def load_idx(
    images_path: Path | str,
    labels_path: Path | str,
    *,
    standardize: bool = False,
    limit: int | None = None,
    num_classes: int = 10,
    split: str = "train",
) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped). Pixels are scaled to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    with _open(images_path) as f:
        num_images, rows, cols = _read_header(f, images_path, IDX_IMAGES_MAGIC, 3)
        expected = num_images * rows * cols
        payload = f.read(expected)
    if len(payload) < expected:
        raise FormatError(f"{images_path}: truncated pixel payload, {len(payload)} of {expected} bytes")

    with _open(labels_path) as f:
        (num_labels,) = _read_header(f, labels_path, IDX_LABELS_MAGIC, 1)
        label_bytes = f.read(num_labels)
    if len(label_bytes) < num_labels:
        raise FormatError(f"{labels_path}: truncated label payload, {len(label_bytes)} of {num_labels} bytes")
    if num_labels != num_images:
        raise FormatError(f"count mismatch: {num_images} images in {images_path}, {num_labels} labels in {labels_path}")

    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(num_images, 1, rows, cols)
    features = pixels.astype(np.float64) / 255.0
    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    if limit is not None:
        features, labels = features[:limit], labels[:limit]
    if standardize:
        features = standardize_features(features)
    inferred = int(labels.max()) + 1 if labels.size else 1
    logger.info("Loaded %d IDX images of %dx%d from %s", len(labels), rows, cols, images_path)
    return Dataset(features=features, labels=labels, num_classes=max(num_classes, inferred), split=split)


def write_idx(dataset: Dataset, images_path: Path | str, labels_path: Path | str) -> None:
    """Write a (N, 1, H, W) dataset with features in [0, 1] as an IDX image/label pair."""
    if dataset.features.ndim != 4 or dataset.features.shape[1] != 1:
        raise ArgumentError(f"write_idx expects (N, 1, H, W) features, got {dataset.features.shape}")
    n, _, rows, cols = dataset.features.shape
    pixels = np.clip(np.rint(dataset.features * 255.0), 0, 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + pixels.tobytes())
    labels = dataset.labels.astype(np.uint8)
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + labels.tobytes())


def load_csv(path: Path | str, *, num_classes: int | None = None, split: str = "train") -> Dataset:
    """Read a CSV with a header row; the ``label`` column holds class indices, the rest are features."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CSV file not found: {path}")
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or LABEL_COLUMN not in reader.fieldnames:
            raise FormatError(f"{path}: header must contain a '{LABEL_COLUMN}' column")
        feature_columns = [name for name in reader.fieldnames if name != LABEL_COLUMN]
        features, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            try:
                labels.append(int(row[LABEL_COLUMN]))
                features.append([float(row[name]) for name in feature_columns])
            except (TypeError, ValueError) as e:
                raise FormatError(f"{path}:{line_no}: {e}") from e
    label_arr = np.asarray(labels, dtype=np.int64)
    inferred = int(label_arr.max()) + 1 if label_arr.size else 1
    return Dataset(
        features=as_tensor(features).reshape(len(labels), len(feature_columns)),
        labels=label_arr,
        num_classes=num_classes or inferred,
        split=split,
    )


def feature_moments(features: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and standard deviation; constant features get a standard deviation of 1."""
    mean = features.mean(axis=0, keepdims=True)
    std = features.std(axis=0, keepdims=True)
    return mean, np.where(std > 0, std, 1.0)


def standardize_features(features: Tensor, moments: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    """Shift and scale by ``moments``, or by the features' own moments when none are given."""
    mean, std = moments if moments is not None else feature_moments(features)
    return (features - mean) / std



def batches(
    dataset: Dataset,
    batch_size: int,
    seed: int,
    drop_last: bool = False,
    *,
    epoch: int = 0,
    shuffle: bool = True,
) -> list[tuple[Tensor, np.ndarray]]:
    """One epoch of ``(features, labels)`` mini-batches in a seeded per-epoch permutation."""
    if batch_size < 1:
        raise ArgumentError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if drop_last and batch_size > n:
        raise DomainError(f"batch_size {batch_size} exceeds {n} samples with drop_last: the epoch would be empty")
    order = rng_for(seed, Stream.SHUFFLE, epoch).permutation(n) if shuffle else np.arange(n)
    stop = n - n % batch_size if drop_last else n
    return [
        (dataset.features[order[i : i + batch_size]], dataset.labels[order[i : i + batch_size]])
        for i in range(0, stop, batch_size)
    ]


def _limit(dataset: Dataset, limit: int | None) -> Dataset:
    if limit is None:
        return dataset
    return dataset.subset(np.arange(min(limit, len(dataset))))


def load_dataset(config: DataConfig, seed: int, *, drift_batch_size: int = 32) -> SplitDataset:
    """Build or read the train/test pair described by ``config``.

    Drifting blobs translate every consecutive group of ``drift_batch_size`` train samples. With ``standardize``
    both splits are shifted and scaled by the train split's per-feature moments.
    """
    if config.source == "idx":
        assert config.train_images and config.train_labels and config.test_images and config.test_labels
        options = {"limit": config.limit, "num_classes": config.num_classes}
        train = load_idx(config.train_images, config.train_labels, split="train", **options)  # type: ignore[arg-type]
        test = load_idx(config.test_images, config.test_labels, split="test", **options)  # type: ignore[arg-type]
    else:
        if config.source == "csv":
            assert config.train_csv and config.test_csv
            train = load_csv(config.train_csv, num_classes=config.num_classes, split="train")
            test = load_csv(config.test_csv, num_classes=config.num_classes, split="test")
        else:
            train = gen_blobs(
                seed,
                config.n_per_class,
                config.num_classes,
                config.dim,
                config.class_separation,
                config.drift_per_batch,
                drift_batch_size=drift_batch_size,
                split="train",
            )
            test = gen_blobs(
                seed, config.test_per_class, config.num_classes, config.dim, config.class_separation, split="test"
            )
        train, test = _limit(train, config.limit), _limit(test, config.limit)

    if train.sample_shape != test.sample_shape:
        raise FormatError(f"train samples have shape {train.sample_shape}, test samples {test.sample_shape}")
    if config.standardize:
        moments = feature_moments(train.features)
        train = train.model_copy(update={"features": standardize_features(train.features, moments)})
        test = test.model_copy(update={"features": standardize_features(test.features, moments)})
    logger.info(
        "Dataset %s: %d train / %d test samples of shape %s", config.source, len(train), len(test), train.sample_shape
    )
    return SplitDataset(train=train, test=test)
