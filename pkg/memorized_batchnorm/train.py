"""SGD, training schedules, single/double-forward iterations and the epoch loop."""

import csv
import logging
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import IO, NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .data import Dataset, SplitDataset, Stream, batches, rng_for
from .errors import ArgumentError, NumericError
from .models import ForwardScheme, RunConfig, TrainConfig
from .net import Flatten, ForwardMode, Network, build_cnn, build_mlp, error_rate, softmax_xent
from .stats import BatchStats
from .tensor import Parameter, Tensor

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ("epoch", "split", "loss", "error", "lr", "lambda", "staleness", "method", "seed", "batch_size")


class OptState:
    """Momentum buffers keyed by parameter name, zero-initialized on first use."""

    def __init__(self) -> None:
        self.velocity: dict[str, Tensor] = {}

    def buffer(self, param: Parameter) -> Tensor:
        v = self.velocity.setdefault(param.name, np.zeros_like(param.value))
        if v.shape != param.value.shape:
            raise ArgumentError(f"Velocity for {param.name} has shape {v.shape}, parameter has {param.value.shape}")
        return v


def sgd_step(
    params: Sequence[Parameter],
    opt: OptState,
    lr: float,
    momentum: float,
    weight_decay: float,
    grads: Mapping[str, Tensor] | None = None,
) -> None:
    """``v = momentum * v + (grad + weight_decay * param)``; ``param -= lr * v``.

    Gradients default to each parameter's ``grad`` slot. Parameters with ``decay=False`` (gamma, beta)
    get no weight decay.
    """
    for param in params:
        grad = param.grad if grads is None else grads[param.name]
        if grad.shape != param.value.shape:
            raise ArgumentError(f"Gradient for {param.name} has shape {grad.shape}, parameter has {param.value.shape}")
        step = grad + weight_decay * param.value if param.decay else grad
        v = momentum * opt.buffer(param) + step
        opt.velocity[param.name] = v
        param.value = param.value - lr * v


class Schedule(NamedTuple):
    lr: float
    lam: float
    brn_bounds: tuple[float, float]


def schedule_at(progress: float, config: RunConfig) -> Schedule:
    """Piecewise-constant lr and lambda, BRN bounds ramped linearly between the configured fractions."""
    if not 0.0 <= progress <= 1.0:
        raise ArgumentError(f"progress must lie in [0, 1], got {progress}")
    train, norm = config.train, config.norm
    drops = sum(1 for fraction in train.lr_drops if progress >= fraction)
    lr = train.lr0 * 0.1**drops
    lam = next(value for fraction, value in reversed(train.lambda_schedule) if progress >= fraction)

    span = norm.brn_ramp_end - norm.brn_ramp_start
    if span > 0:
        ramp = float(np.clip((progress - norm.brn_ramp_start) / span, 0.0, 1.0))
    else:
        ramp = 1.0 if progress >= norm.brn_ramp_end else 0.0
    bounds = (1.0 + (norm.brn_r_max - 1.0) * ramp, norm.brn_d_max * ramp)
    return Schedule(lr, lam, bounds)


class IterationMetrics(BaseModel):
    loss: float
    error: float
    staleness: float = Field(ge=0.0)


def _relative_distance(recorded: BatchStats, current: BatchStats) -> float:
    delta = np.concatenate([recorded.mean - current.mean, recorded.var - current.var])
    reference = np.concatenate([current.mean, current.var])
    return float(np.linalg.norm(delta) / max(np.linalg.norm(reference), 1e-12))


def staleness(recorded: Sequence[BatchStats], current: Sequence[BatchStats]) -> float:
    """Largest relative L2 distance, over norm layers, between recorded and recomputed statistics."""
    if len(recorded) != len(current):
        raise ArgumentError(f"Got {len(recorded)} recorded and {len(current)} recomputed statistics")
    return max((_relative_distance(r, c) for r, c in zip(recorded, current, strict=True)), default=0.0)


def _recompute_stats(net: Network, x: Tensor) -> list[BatchStats]:
    net.forward(x, ForwardMode.STATS_ONLY)
    return net.batch_stats()


def _train_pass(net: Network, batch: tuple[Tensor, np.ndarray], iteration: int | None) -> tuple[float, float, Tensor]:
    x, labels = batch
    if len(x) == 0:
        raise ArgumentError("Cannot train on an empty batch")
    logits = net.forward(x, ForwardMode.TRAIN_GRAD)
    loss, grad = softmax_xent(logits, labels)
    if not np.isfinite(loss):
        raise NumericError(f"Non-finite training loss {loss} at iteration {iteration}", iteration)
    return loss, error_rate(logits, labels), grad


def train_iteration_double(
    net: Network,
    batch: tuple[Tensor, np.ndarray],
    opt: OptState,
    config: TrainConfig,
    lr: float | None = None,
    *,
    iteration: int | None = None,
) -> IterationMetrics:
    """Forward, backward and update, then a stats-only forward whose fresh statistics are recorded."""
    lr = config.lr0 if lr is None else lr
    loss, error, grad = _train_pass(net, batch, iteration)
    net.backward(grad)
    sgd_step(net.parameters(), opt, lr, config.momentum, config.weight_decay)

    fresh = _recompute_stats(net, batch[0])
    stale = staleness(fresh, _recompute_stats(net, batch[0])) if config.track_staleness else 0.0
    net.record(fresh)
    return IterationMetrics(loss=loss, error=error, staleness=stale)


def train_iteration_single(
    net: Network,
    batch: tuple[Tensor, np.ndarray],
    opt: OptState,
    config: TrainConfig,
    lr: float | None = None,
    *,
    iteration: int | None = None,
) -> IterationMetrics:
    """Forward, backward and update; records the pre-update statistics of the training forward."""
    lr = config.lr0 if lr is None else lr
    loss, error, grad = _train_pass(net, batch, iteration)
    recorded = net.batch_stats()
    net.backward(grad)
    sgd_step(net.parameters(), opt, lr, config.momentum, config.weight_decay)

    stale = staleness(recorded, _recompute_stats(net, batch[0])) if config.track_staleness else 0.0
    net.record(recorded)
    return IterationMetrics(loss=loss, error=error, staleness=stale)


def build_network(config: RunConfig, sample_shape: tuple[int, ...], num_classes: int) -> Network:
    """Network described by ``config.model`` with norm layers configured for the start of training."""
    start = schedule_at(0.0, config)
    norm = config.norm
    norm_kwargs = {
        "eps": norm.eps,
        "theta": norm.theta,
        "memory_k": norm.memory_k,
        "eta": norm.eta,
        "lam": start.lam,
        "brn_bounds": start.brn_bounds,
    }
    rng = rng_for(config.seed, Stream.INIT)
    if config.model.arch == "cnn":
        if len(sample_shape) != 3:
            raise ArgumentError(f"model.arch = cnn needs (C, H, W) samples, got {sample_shape}")
        return build_cnn(
            sample_shape,  # type: ignore[arg-type]
            num_classes,
            rng,
            channels=config.model.channels,
            norm_mode=norm.mode,
            **norm_kwargs,
        )
    input_dim = int(np.prod(sample_shape))
    net = build_mlp(
        input_dim,
        num_classes,
        rng,
        hidden=config.model.hidden,
        depth=config.model.depth,
        norm_mode=norm.mode,
        **norm_kwargs,
    )
    if len(sample_shape) != 1:
        net = Network([Flatten(), *net.layers], sample_shape)
    return net


def evaluate(net: Network, dataset: Dataset, batch_size: int) -> tuple[float, float]:
    """Mean loss and error over ``dataset``.

    Uses stored statistics once they exist; before that a non-recording stats-only pass normalizes
    each evaluation batch with its own statistics.
    """
    mode = ForwardMode.EVAL if net.stats_ready() else ForwardMode.STATS_ONLY
    total_loss = total_wrong = 0.0
    for x, labels in batches(dataset, batch_size, seed=0, shuffle=False):
        logits = net.forward(x, mode)
        loss, _ = softmax_xent(logits, labels)
        total_loss += loss * len(labels)
        total_wrong += error_rate(logits, labels) * len(labels)
    n = max(len(dataset), 1)
    return total_loss / n, total_wrong / n


class MetricsRow(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    epoch: int
    split: str
    loss: float
    error: float
    lr: float
    lambda_: float = Field(alias="lambda")
    staleness: float
    method: str
    seed: int
    batch_size: int

    def csv_fields(self) -> list[str]:
        values = self.model_dump(by_alias=True)
        return [format_value(values[column]) for column in METRICS_COLUMNS]


def format_value(value: object) -> str:
    """Plain decimal, shortest round-trip text for floats."""
    if isinstance(value, float):
        return np.format_float_positional(value, trim="-")
    return str(value)


class RunRecord(BaseModel):
    """Per-epoch metrics of one run."""

    method: str
    seed: int
    batch_size: int
    rows: list[MetricsRow] = Field(default_factory=list)

    def append(self, epoch: int, split: str, loss: float, error: float, lr: float, lam: float, stale: float) -> None:
        self.rows.append(
            MetricsRow(
                epoch=epoch,
                split=split,
                loss=loss,
                error=error,
                lr=lr,
                lambda_=lam,
                staleness=stale,
                method=self.method,
                seed=self.seed,
                batch_size=self.batch_size,
            )
        )

    def final_error(self, split: str = "test") -> float:
        rows = [row for row in self.rows if row.split == split]
        if not rows:
            raise ArgumentError(f"Run has no {split} rows")
        return rows[-1].error

    def to_csv(self, path: Path | IO[str]) -> None:
        write_metrics([self], path)


def sort_rows(records: Sequence[RunRecord]) -> list[MetricsRow]:
    rows = [row for record in records for row in record.rows]
    return sorted(rows, key=lambda r: (r.method, r.batch_size, r.seed, r.epoch, r.split))


def write_metrics(records: Sequence[RunRecord], path: Path | IO[str]) -> None:
    """Write the rows of ``records`` as metrics CSV, one header row, sorted by run then epoch."""
    if isinstance(path, Path):
        with path.open("w", newline="", encoding="utf-8") as f:
            write_metrics(records, f)
        return
    writer = csv.writer(path, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    for row in sort_rows(records):
        writer.writerow(row.csv_fields())


def fit(config: RunConfig, dataset: SplitDataset, *, net: Network | None = None) -> RunRecord:
    """Train for ``config.train.total_epochs`` epochs; deterministic given ``config.seed``."""
    train_cfg = config.train
    if net is None:
        net = build_network(config, dataset.train.sample_shape, dataset.train.num_classes)
    iterate = train_iteration_double if train_cfg.forward_scheme is ForwardScheme.DOUBLE else train_iteration_single
    record = RunRecord(method=config.method, seed=config.seed, batch_size=train_cfg.batch_size)
    opt = OptState()

    start = schedule_at(0.0, config)
    for split, data in (("train", dataset.train), ("test", dataset.test)):
        loss, error = evaluate(net, data, train_cfg.batch_size)
        record.append(0, split, loss, error, start.lr, start.lam, 0.0)

    # drifting blobs keep generation order; every epoch replays the same drift
    drifting = config.data.source == "blobs" and config.data.drift_per_batch > 0
    iteration = 0
    total = train_cfg.total_epochs
    for epoch in range(1, total + 1):
        sched = schedule_at((epoch - 1) / total, config)
        net.set_lambda(sched.lam)
        net.set_brn_bounds(sched.brn_bounds)
        metrics: list[IterationMetrics] = []
        epoch_batches = batches(
            dataset.train, train_cfg.batch_size, config.seed, train_cfg.drop_last, epoch=epoch, shuffle=not drifting
        )
        for batch in epoch_batches:
            metrics.append(iterate(net, batch, opt, train_cfg, sched.lr, iteration=iteration))
            iteration += 1
            logger.debug("iteration %d: loss=%.6f stale=%.3g", iteration, metrics[-1].loss, metrics[-1].staleness)

        mean_stale = float(np.mean([m.staleness for m in metrics])) if metrics else 0.0
        train_loss = float(np.mean([m.loss for m in metrics])) if metrics else float("nan")
        train_error = float(np.mean([m.error for m in metrics])) if metrics else float("nan")
        test_loss, test_error = evaluate(net, dataset.test, train_cfg.batch_size)
        record.append(epoch, "train", train_loss, train_error, sched.lr, sched.lam, mean_stale)
        record.append(epoch, "test", test_loss, test_error, sched.lr, sched.lam, mean_stale)
        logger.info(
            "[%s seed=%d] epoch %d/%d lr=%g lambda=%g train_loss=%.4f test_error=%.4f",
            config.method,
            config.seed,
            epoch,
            total,
            sched.lr,
            sched.lam,
            train_loss,
            test_error,
        )
    return record
