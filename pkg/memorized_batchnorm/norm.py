"""Normalization layers: BN, memorized BN, batch renormalization and moving-statistics normalization.

Every variant normalizes per feature with ``(x - mean) / sqrt(var + eps)`` followed by the learnable
affine ``gamma * x_hat + beta``. They differ in where ``mean``/``var`` come from:

* ``bn``      statistics of the current batch.
* ``mbn``     weighted pooled statistics of the memory plus the current batch, with the
              cross-batch correction term. Evaluation reuses the last pooled statistics.
* ``brn``     current batch, followed by the clipped correction ``r * x_hat + d`` towards the
              moving averages. ``r`` and ``d`` are constants for the backward pass.
* ``movnorm`` weighted averages of the memorized means and variances without the correction term.

Memory entries are constants in every backward pass: only the current batch's contribution to the
pooled statistics is differentiated.
"""

import logging
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict

from .errors import ArgumentError, StateError
from .stats import (
    DEFAULT_ETA,
    DEFAULT_LAMBDA,
    DEFAULT_MEMORY_K,
    DEFAULT_THETA,
    BatchStats,
    MovingStats,
    StatsMemory,
    memorized_stats,
    memory_history,
    push,
    update_moving,
    weight_sum,
    weighted_moving_stats,
)
from .tensor import Parameter, Tensor, affine, feature_axes, sum_features, to_feature

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-5


class NormMode(str, Enum):
    BN = "bn"
    MBN = "mbn"
    BRN = "brn"
    MOVNORM = "movnorm"


MEMORY_MODES = frozenset({NormMode.MBN, NormMode.MOVNORM})
MOVING_MODES = frozenset({NormMode.BN, NormMode.BRN, NormMode.MOVNORM})


class ForwardCache(BaseModel):
    """Intermediates of a gradient-pass forward that the backward pass reads."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mode: NormMode
    x_hat: np.ndarray
    centered: np.ndarray
    # x minus the current batch mean; differs from ``centered`` only for movnorm
    var_centered: np.ndarray
    inv_std: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    weight_sum: float
    r: np.ndarray | None = None
    d: np.ndarray | None = None


class NormLayer:
    """State of one normalization layer: affine parameters, statistics stores and forward cache."""

    def __init__(
        self,
        num_features: int,
        mode: NormMode | str = NormMode.BN,
        *,
        eps: float = DEFAULT_EPS,
        theta: float = DEFAULT_THETA,
        memory_k: int = DEFAULT_MEMORY_K,
        eta: float = DEFAULT_ETA,
        lam: float = DEFAULT_LAMBDA,
        brn_bounds: tuple[float, float] = (1.0, 0.0),
        name: str = "norm",
    ):
        if eps <= 0:
            raise ArgumentError(f"eps must be positive, got {eps}")
        self.mode = NormMode(mode)
        self.num_features = num_features
        self.eps = eps
        self.name = name
        self.gamma = Parameter(f"{name}.gamma", np.ones(num_features), decay=False)
        self.beta = Parameter(f"{name}.beta", np.zeros(num_features), decay=False)
        self.memory = StatsMemory(memory_k, eta, lam) if self.mode in MEMORY_MODES else None
        self.moving = MovingStats(theta=theta) if self.mode in MOVING_MODES else None
        self.brn_bounds = brn_bounds
        # pooled statistics of the last gradient-pass forward; mbn evaluates with them
        self.memorized: tuple[np.ndarray, np.ndarray] | None = None
        self.cache: ForwardCache | None = None
        self.batch_stats: BatchStats | None = None

    def __repr__(self) -> str:
        return f"NormLayer({self.num_features}, mode={self.mode.value!r})"

    @property
    def brn_bounds(self) -> tuple[float, float]:
        return self._brn_bounds

    @brn_bounds.setter
    def brn_bounds(self, bounds: tuple[float, float]) -> None:
        r_max, d_max = bounds
        if r_max < 1.0 or d_max < 0.0:
            raise ArgumentError(f"BRN bounds need r_max >= 1 and d_max >= 0, got {bounds}")
        self._brn_bounds = (float(r_max), float(d_max))

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def set_lambda(self, lam: float) -> None:
        if self.memory is not None:
            self.memory.lam = lam

    def stats_ready(self) -> bool:
        """Whether evaluation-mode statistics exist."""
        if self.mode is NormMode.MBN:
            return self.memorized is not None
        assert self.moving is not None
        return self.moving.initialized

    def forward(self, x: Tensor, *, grad_pass: bool = True) -> Tensor:
        """Training-mode forward. Never records statistics; see ``record``."""
        if self.mode is NormMode.BN:
            return bn_forward_train(x, self, grad_pass=grad_pass, record=False)
        if self.mode is NormMode.MBN:
            return mbn_forward(x, self, grad_pass=grad_pass)
        if self.mode is NormMode.BRN:
            return brn_forward_train(x, self, grad_pass=grad_pass, record=False)
        return movnorm_forward_train(x, self, grad_pass=grad_pass)

    def evaluate(self, x: Tensor) -> Tensor:
        return norm_forward_eval(x, self)

    def backward(self, grad_y: Tensor) -> Tensor:
        """Backpropagate ``grad_y``; parameter gradients land in ``gamma.grad`` and ``beta.grad``."""
        if self.mode is NormMode.BRN:
            grad_x, grad_gamma, grad_beta = brn_backward(grad_y, self)
        elif self.mode is NormMode.MBN:
            grad_x, grad_gamma, grad_beta = mbn_backward(grad_y, self)
        elif self.mode is NormMode.MOVNORM:
            grad_x, grad_gamma, grad_beta = movnorm_backward(grad_y, self)
        else:
            grad_x, grad_gamma, grad_beta = bn_backward(grad_y, self)
        self.gamma.grad = grad_gamma
        self.beta.grad = grad_beta
        return grad_x

    def record(self, stats: BatchStats) -> None:
        """Store batch statistics: push into the memory and/or blend into the moving averages."""
        if self.memory is not None:
            push(self.memory, stats)
        if self.moving is not None:
            self.moving = update_moving(self.moving, stats)
        logger.debug("%s recorded statistics (count=%d)", self.name, stats.count)


def _check_input(x: Tensor, layer: NormLayer) -> None:
    feature_axes(x)
    if x.shape[1] != layer.num_features:
        raise ArgumentError(
            f"{layer.name}: input has {x.shape[1]} features, gamma/beta have {layer.num_features}"
        )


def _normalize(x: Tensor, mean: np.ndarray, var: np.ndarray, eps: float) -> tuple[Tensor, np.ndarray, Tensor]:
    centered = x - to_feature(mean, x.ndim)
    inv_std = 1.0 / np.sqrt(var + eps)
    return centered, inv_std, centered * to_feature(inv_std, x.ndim)


def _scale_shift(x_hat: Tensor, layer: NormLayer) -> Tensor:
    return affine(x_hat, to_feature(layer.gamma.value, x_hat.ndim), to_feature(layer.beta.value, x_hat.ndim))


def _pooled_forward(
    x: Tensor,
    layer: NormLayer,
    stats: BatchStats,
    mean: np.ndarray,
    var: np.ndarray,
    total: float,
    grad_pass: bool,
) -> Tensor:
    centered, inv_std, x_hat = _normalize(x, mean, var, layer.eps)
    layer.batch_stats = stats
    if grad_pass:
        var_centered = centered
        if layer.mode is NormMode.MOVNORM:
            var_centered = x - to_feature(stats.mean, x.ndim)
        layer.cache = ForwardCache(
            mode=layer.mode,
            x_hat=x_hat,
            centered=centered,
            var_centered=var_centered,
            inv_std=inv_std,
            mean=mean,
            var=var,
            weight_sum=total,
        )
    else:
        layer.cache = None
    return _scale_shift(x_hat, layer)


def bn_forward_train(x: Tensor, layer: NormLayer, *, grad_pass: bool = True, record: bool = True) -> Tensor:
    """Normalize with this batch's statistics; optionally blend them into the moving averages."""
    _check_input(x, layer)
    stats = BatchStats.from_tensor(x)
    y = _pooled_forward(x, layer, stats, stats.mean, stats.var, float(stats.count), grad_pass)
    if record and layer.moving is not None:
        layer.moving = update_moving(layer.moving, stats)
    return y


def mbn_forward(x: Tensor, layer: NormLayer, grad_pass: bool = True) -> Tensor:
    """Normalize with memorized statistics of the memory plus this batch. Does not push to the memory."""
    if layer.mode is not NormMode.MBN or layer.memory is None:
        raise StateError(f"{layer.name}: mbn_forward needs an mbn layer, got {layer.mode.value}")
    _check_input(x, layer)
    stats = BatchStats.from_tensor(x)
    mu_hat, var_hat = memorized_stats(layer.memory, stats)
    total = weight_sum(layer.memory, stats)
    if grad_pass:
        layer.memorized = (mu_hat, var_hat)
    return _pooled_forward(x, layer, stats, mu_hat, var_hat, total, grad_pass)


def movnorm_forward_train(x: Tensor, layer: NormLayer, grad_pass: bool = True) -> Tensor:
    """Normalize with weighted averages of memorized means and variances (no correction term)."""
    if layer.mode is not NormMode.MOVNORM or layer.memory is None:
        raise StateError(f"{layer.name}: movnorm_forward_train needs a movnorm layer, got {layer.mode.value}")
    _check_input(x, layer)
    stats = BatchStats.from_tensor(x)
    mean, var = weighted_moving_stats(memory_history(layer.memory, stats))
    total = weight_sum(layer.memory, stats)
    return _pooled_forward(x, layer, stats, mean, var, total, grad_pass)


def brn_correction(layer: NormLayer, stats: BatchStats, moving: MovingStats) -> tuple[np.ndarray, np.ndarray]:
    """Clipped ``r = sigma_B / sigma_mov`` and ``d = (mu_B - mu_mov) / sigma_mov``."""
    assert moving.mean is not None and moving.var is not None
    r_max, d_max = layer.brn_bounds
    sigma_mov = np.sqrt(moving.var + layer.eps)
    sigma_batch = np.sqrt(stats.var + layer.eps)
    r = np.clip(sigma_batch / sigma_mov, 1.0 / r_max, r_max)
    d = np.clip((stats.mean - moving.mean) / sigma_mov, -d_max, d_max)
    return r, d


def brn_forward_train(
    x: Tensor,
    layer: NormLayer,
    *,
    grad_pass: bool = True,
    record: bool = True,
    rd: tuple[np.ndarray, np.ndarray] | None = None,
) -> Tensor:
    """Batch renormalization. ``r``/``d`` come from the pre-update moving averages unless ``rd`` pins them."""
    if layer.moving is None:
        raise StateError(f"{layer.name}: brn_forward_train needs moving statistics")
    _check_input(x, layer)
    stats = BatchStats.from_tensor(x)
    if rd is None:
        reference = layer.moving if layer.moving.initialized else update_moving(layer.moving, stats)
        r, d = brn_correction(layer, stats, reference)
    else:
        r, d = (np.asarray(v, dtype=np.float64) for v in rd)

    centered, inv_std, x_hat = _normalize(x, stats.mean, stats.var, layer.eps)
    corrected = to_feature(r, x.ndim) * x_hat + to_feature(d, x.ndim)
    layer.batch_stats = stats
    if grad_pass:
        layer.cache = ForwardCache(
            mode=layer.mode,
            x_hat=x_hat,
            centered=centered,
            var_centered=centered,
            inv_std=inv_std,
            mean=stats.mean,
            var=stats.var,
            weight_sum=float(stats.count),
            r=r,
            d=d,
        )
    else:
        layer.cache = None
    if record:
        layer.moving = update_moving(layer.moving, stats)
    return _scale_shift(corrected, layer)


def norm_forward_eval(x: Tensor, layer: NormLayer) -> Tensor:
    """Normalize with stored statistics. Mutates nothing."""
    _check_input(x, layer)
    if layer.mode is NormMode.MBN:
        if layer.memorized is None:
            raise StateError(f"{layer.name}: no memorized statistics yet, run a training forward first")
        mean, var = layer.memorized
    else:
        assert layer.moving is not None
        if not layer.moving.initialized:
            raise StateError(f"{layer.name}: moving statistics are not initialized")
        assert layer.moving.mean is not None and layer.moving.var is not None
        mean, var = layer.moving.mean, layer.moving.var
    _, _, x_hat = _normalize(x, mean, var, layer.eps)
    return _scale_shift(x_hat, layer)


def _require_cache(layer: NormLayer, grad_y: Tensor) -> ForwardCache:
    if layer.cache is None:
        raise StateError(f"{layer.name}: backward called without a gradient-pass forward")
    if grad_y.shape != layer.cache.x_hat.shape:
        raise ArgumentError(f"{layer.name}: grad shape {grad_y.shape} does not match {layer.cache.x_hat.shape}")
    return layer.cache


def _pooled_backward(
    grad_y: Tensor, layer: NormLayer, cache: ForwardCache, scale: np.ndarray, effective_x_hat: Tensor
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    # d mean / dx = 1 / S and d var / dx = 2 (x - m) / S, with S = sum(alpha_i n_i)
    ndim = grad_y.ndim
    axes = feature_axes(grad_y)
    total = cache.weight_sum
    inv_std = to_feature(cache.inv_std, ndim)

    grad_beta = sum_features(grad_y)
    grad_gamma = sum_features(grad_y * effective_x_hat)

    grad_x_hat = grad_y * to_feature(layer.gamma.value * scale, ndim)
    grad_var = np.sum(grad_x_hat * cache.centered, axis=axes, keepdims=True) * -0.5 * inv_std**3
    grad_mean = -np.sum(grad_x_hat, axis=axes, keepdims=True) * inv_std
    grad_x = grad_x_hat * inv_std + grad_mean / total + grad_var * 2.0 * cache.var_centered / total
    return grad_x, grad_gamma, grad_beta


def bn_backward(grad_y: Tensor, layer: NormLayer) -> tuple[Tensor, np.ndarray, np.ndarray]:
    cache = _require_cache(layer, grad_y)
    return _pooled_backward(grad_y, layer, cache, np.ones(layer.num_features), cache.x_hat)


def mbn_backward(grad_y: Tensor, layer: NormLayer) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Gradients w.r.t. input, gamma and beta; memory entries are constants."""
    cache = _require_cache(layer, grad_y)
    return _pooled_backward(grad_y, layer, cache, np.ones(layer.num_features), cache.x_hat)


def movnorm_backward(grad_y: Tensor, layer: NormLayer) -> tuple[Tensor, np.ndarray, np.ndarray]:
    cache = _require_cache(layer, grad_y)
    return _pooled_backward(grad_y, layer, cache, np.ones(layer.num_features), cache.x_hat)


def brn_backward(grad_y: Tensor, layer: NormLayer) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """BN backward with the x_hat path scaled by the constant ``r``."""
    cache = _require_cache(layer, grad_y)
    if cache.r is None or cache.d is None:
        raise StateError(f"{layer.name}: cache lacks the BRN correction")
    ndim = grad_y.ndim
    effective = to_feature(cache.r, ndim) * cache.x_hat + to_feature(cache.d, ndim)
    return _pooled_backward(grad_y, layer, cache, cache.r, effective)
