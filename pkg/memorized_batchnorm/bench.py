"""Quality of normalization-statistics estimators on a drifting Gaussian stream.

Each trial draws a stream of batches whose true mean moves by ``drift`` per batch and scores every
estimator's mean and variance against the generating moments of the current batch. Scoring starts
once the memory is full.

Estimators:

* ``single``    statistics of the current batch alone.
* ``moving``    exponential moving averages including the current batch.
* ``weighted``  weighted averages of memorized means and variances, no correction term.
* ``memorized`` pooled statistics with the correction term; entries are recorded as the batch was drawn.
* ``refreshed`` as ``memorized`` but each entry is recorded after its batch has followed the drift for
                one more step, the stream analogue of the double-forward scheme.
"""

import csv
import logging
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from .data import Stream, drift_direction, drift_stream, rng_for
from .models import BenchConfig
from .stats import (
    BatchStats,
    MovingStats,
    StatsMemory,
    memorized_stats,
    memory_history,
    push,
    update_moving,
    weighted_moving_stats,
)
from .train import format_value

logger = logging.getLogger(__name__)

ESTIMATORS = ("single", "moving", "weighted", "memorized", "refreshed")
BENCH_COLUMNS = ("batch_size", "estimator", "mse_mean", "mse_var", "trials")


class EstimatorScore(BaseModel):
    batch_size: int
    estimator: str
    mse_mean: float
    mse_var: float
    trials: int


def _squared_errors(
    estimate: tuple[np.ndarray, np.ndarray], true_mean: np.ndarray, true_var: np.ndarray
) -> tuple[float, float]:
    mean, var = estimate
    return float(np.mean(np.square(mean - true_mean))), float(np.mean(np.square(var - true_var)))


def run_trial(config: BenchConfig, batch_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Mean squared errors ``[mse_mean, mse_var]`` of every estimator over one stream."""
    shift = config.drift * drift_direction(config.dim)
    stale = StatsMemory(config.memory_k, config.eta, config.lam)
    refreshed = StatsMemory(config.memory_k, config.eta, config.lam)
    moving = MovingStats(theta=config.theta)
    totals = {name: np.zeros(2) for name in ESTIMATORS}
    scored = 0

    stream = drift_stream(rng, batch_size, config.num_batches + config.memory_k, config.dim, config.drift, config.scale)
    for step, (batch, true_mean, true_var) in enumerate(stream):
        current = BatchStats.from_tensor(batch)
        moving = update_moving(moving, current)
        estimates = {
            "single": (current.mean, current.var),
            "moving": (moving.mean, moving.var),
            "weighted": weighted_moving_stats(memory_history(stale, current)),
            "memorized": memorized_stats(stale, current),
            "refreshed": memorized_stats(refreshed, current),
        }
        if step >= config.memory_k:
            for name, estimate in estimates.items():
                totals[name] += _squared_errors(estimate, true_mean, true_var)  # type: ignore[arg-type]
            scored += 1
        push(stale, current)
        push(refreshed, BatchStats.from_tensor(batch + shift))
    return {name: total / max(scored, 1) for name, total in totals.items()}


def run_bench(config: BenchConfig, seed: int) -> list[EstimatorScore]:
    """Average per-trial errors over ``config.trials`` streams for every configured batch size."""
    scores: list[EstimatorScore] = []
    for batch_size in config.batch_sizes:
        sums = {name: np.zeros(2) for name in ESTIMATORS}
        for trial in range(config.trials):
            rng = rng_for(seed, Stream.BENCH, batch_size, trial)
            for name, errors in run_trial(config, batch_size, rng).items():
                sums[name] += errors
        for name in ESTIMATORS:
            mse_mean, mse_var = sums[name] / config.trials
            scores.append(
                EstimatorScore(
                    batch_size=batch_size,
                    estimator=name,
                    mse_mean=float(mse_mean),
                    mse_var=float(mse_var),
                    trials=config.trials,
                )
            )
        logger.info(
            "batch %d: %s",
            batch_size,
            ", ".join(f"{s.estimator}={s.mse_mean:.3g}/{s.mse_var:.3g}" for s in scores[-len(ESTIMATORS) :]),
        )
    return scores


def write_bench(scores: list[EstimatorScore], path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(BENCH_COLUMNS)
        for score in scores:
            values = score.model_dump()
            writer.writerow([format_value(values[column]) for column in BENCH_COLUMNS])
