"""Batch statistics, moving averages and the memorized-statistics estimator."""

import logging
from collections import deque
from collections.abc import Iterator, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import ArgumentError
from .tensor import Tensor, count_per_feature, feature_axes, reduce_moments

logger = logging.getLogger(__name__)

DEFAULT_MEMORY_K = 20
DEFAULT_ETA = 0.9
DEFAULT_THETA = 0.1
DEFAULT_LAMBDA = 0.1


class BatchStats(BaseModel):
    """Per-feature mean, population variance and element count of one batch at one layer."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mean: np.ndarray
    var: np.ndarray
    count: int = Field(ge=1)

    @field_validator("mean", "var", mode="before")
    @classmethod
    def to_vector(cls, v: object) -> np.ndarray:
        return np.atleast_1d(np.asarray(v, dtype=np.float64))

    @model_validator(mode="after")
    def check_shapes(self) -> "BatchStats":
        if self.mean.shape != self.var.shape:
            raise ValueError(f"mean shape {self.mean.shape} differs from var shape {self.var.shape}")
        if np.any(self.var < 0):
            raise ValueError("var must be non-negative")
        return self

    @classmethod
    def from_tensor(cls, x: Tensor) -> "BatchStats":
        mean, var = reduce_moments(x, feature_axes(x))
        return cls(mean=mean, var=var, count=count_per_feature(x))

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return self.mean.shape


class StatsMemory:
    """FIFO of the ``capacity`` most recent BatchStats of one layer (oldest first)."""

    def __init__(self, capacity: int = DEFAULT_MEMORY_K, eta: float = DEFAULT_ETA, lam: float = DEFAULT_LAMBDA):
        if capacity < 0:
            raise ArgumentError(f"Memory capacity must be >= 0, got {capacity}")
        if not 0.0 < eta <= 1.0:
            raise ArgumentError(f"eta must lie in (0, 1], got {eta}")
        self._entries: deque[BatchStats] = deque(maxlen=capacity)
        self.capacity = capacity
        self.eta = eta
        self.lam = lam

    @property
    def lam(self) -> float:
        return self._lam

    @lam.setter
    def lam(self, value: float) -> None:
        if not 0.0 <= value <= 1.0:
            raise ArgumentError(f"lambda must lie in [0, 1], got {value}")
        self._lam = value

    @property
    def entries(self) -> list[BatchStats]:
        return list(self._entries)

    @property
    def feature_shape(self) -> tuple[int, ...] | None:
        return self._entries[0].feature_shape if self._entries else None

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[BatchStats]:
        return iter(self._entries)

    def check_shape(self, stats: BatchStats) -> None:
        shape = self.feature_shape
        if shape is not None and stats.feature_shape != shape:
            raise ArgumentError(f"Statistics of shape {stats.feature_shape} do not match memory shape {shape}")

    def push(self, entry: BatchStats) -> "StatsMemory":
        return push(self, entry)

    def clear(self) -> None:
        self._entries.clear()


class MovingStats(BaseModel):
    """Exponential moving averages of batch mean and variance."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    theta: float = Field(default=DEFAULT_THETA, gt=0.0, le=1.0)
    mean: np.ndarray | None = None
    var: np.ndarray | None = None

    @property
    def initialized(self) -> bool:
        return self.mean is not None


def push(memory: StatsMemory, entry: BatchStats) -> StatsMemory:
    """Append ``entry`` as the newest record, evicting the oldest beyond capacity."""
    memory.check_shape(entry)
    memory._entries.append(entry)
    return memory


def weights_for_memory(memory: StatsMemory) -> np.ndarray:
    """Weights lam * eta**(m - i) for the m stored entries (oldest first) followed by 1 for the current batch."""
    m = len(memory)
    exponents = np.arange(m - 1, -1, -1, dtype=np.float64)
    return np.append(memory.lam * np.power(memory.eta, exponents), 1.0)


def _stack(entries: Sequence[BatchStats]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    shape = entries[0].feature_shape
    for entry in entries:
        if entry.feature_shape != shape:
            raise ArgumentError(f"Inconsistent statistics shapes: {entry.feature_shape} vs {shape}")
    means = np.stack([e.mean for e in entries])
    variances = np.stack([e.var for e in entries])
    counts = np.array([e.count for e in entries], dtype=np.float64)
    return means, variances, counts


def weight_sum(memory: StatsMemory, current: BatchStats) -> float:
    """Shared denominator sum(alpha_i * n_i) over the memory plus the current batch."""
    counts = np.array([e.count for e in memory] + [current.count], dtype=np.float64)
    return float(np.sum(weights_for_memory(memory) * counts))


def memorized_stats(memory: StatsMemory, current: BatchStats) -> tuple[np.ndarray, np.ndarray]:
    """Weighted pooled mean and variance of the memory plus ``current``, with the cross-batch correction term."""
    memory.check_shape(current)
    weights = weights_for_memory(memory)
    if not np.any(weights[:-1]):
        return current.mean.copy(), current.var.copy()

    means, variances, counts = _stack([*memory, current])
    wn = (weights * counts)[:, None]
    total = wn.sum()
    mu_hat = np.sum(wn * means, axis=0) / total
    var_hat = np.sum(wn * (np.square(means - mu_hat) + variances), axis=0) / total
    return mu_hat, var_hat


def weighted_moving_stats(history: Sequence[tuple[BatchStats, float]]) -> tuple[np.ndarray, np.ndarray]:
    """Weighted averages of means and of variances, without the correction term."""
    if not history:
        raise ArgumentError("weighted_moving_stats needs a non-empty history")
    entries = [stats for stats, _ in history]
    weights = np.array([alpha for _, alpha in history], dtype=np.float64)
    if len(entries) == 1 or not np.any(weights[:-1]):
        return entries[-1].mean.copy(), entries[-1].var.copy()

    means, variances, counts = _stack(entries)
    wn = (weights * counts)[:, None]
    total = wn.sum()
    return np.sum(wn * means, axis=0) / total, np.sum(wn * variances, axis=0) / total


def memory_history(memory: StatsMemory, current: BatchStats) -> list[tuple[BatchStats, float]]:
    """Pair the memory entries and the current batch with their weights."""
    memory.check_shape(current)
    return list(zip([*memory, current], weights_for_memory(memory).tolist(), strict=True))


def update_moving(mov: MovingStats, batch: BatchStats) -> MovingStats:
    """Blend ``batch`` into the moving averages; the first observation seeds them exactly."""
    if not mov.initialized:
        return mov.model_copy(update={"mean": batch.mean.copy(), "var": batch.var.copy()})
    assert mov.mean is not None and mov.var is not None
    if mov.mean.shape != batch.feature_shape:
        raise ArgumentError(f"Batch statistics {batch.feature_shape} do not match moving shape {mov.mean.shape}")
    theta = mov.theta
    return mov.model_copy(
        update={
            "mean": theta * batch.mean + (1.0 - theta) * mov.mean,
            "var": theta * batch.var + (1.0 - theta) * mov.var,
        }
    )
