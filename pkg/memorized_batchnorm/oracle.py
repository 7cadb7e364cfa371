"""Ground-truth checks: finite-difference gradients, sample-level pooled statistics, gradient comparison.

The gradient-check suites here back the ``gradcheck`` subcommand.
"""

import copy
import logging
from collections.abc import Callable, Sequence

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, Field

from .errors import ArgumentError, NumericError
from .net import ForwardMode, Network, build_mlp, softmax_xent
from .norm import NormLayer, NormMode, bn_backward, bn_forward_train, brn_forward_train
from .stats import BatchStats
from .tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-4
DEFAULT_REL_TOL = 1e-5
DEFAULT_ABS_TOL = 1e-8
NETWORK_REL_TOL = 1e-4
REDUCTION_TOL = 1e-12
MIN_SPREAD = 0.5


def fd_gradient(f: Callable[[Tensor], float], x: Tensor, h: float = DEFAULT_STEP) -> Tensor:
    """Central differences with the step scaled per coordinate as ``h * max(1, |x_i|)``."""
    if h <= 0:
        raise ArgumentError(f"Step must be positive, got {h}")
    x = as_tensor(x)
    grad = np.zeros_like(x)
    for i in range(x.size):
        original = x.flat[i]
        step = h * max(1.0, abs(original))
        x.flat[i] = original + step
        f_plus = f(x.copy())
        x.flat[i] = original - step
        f_minus = f(x.copy())
        x.flat[i] = original
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"Non-finite function value at coordinate {np.unravel_index(i, x.shape)}")
        grad.flat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def pooled_stats(batches: Sequence[npt.ArrayLike], weights: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean and variance computed directly over raw samples, every sample of batch i weighted alpha_i.

    Batches are (n_i, D) arrays; statistics are per column.
    """
    if len(batches) != len(weights):
        raise ArgumentError(f"Got {len(batches)} batches and {len(weights)} weights")
    if not batches:
        raise ArgumentError("pooled_stats needs at least one batch")
    weights_arr = np.asarray(weights, dtype=np.float64)
    if np.any(weights_arr < 0) or not np.any(weights_arr > 0):
        raise ArgumentError(f"Weights must be non-negative and not all zero, got {weights_arr.tolist()}")

    arrays = [as_tensor(b).reshape(len(b), -1) for b in batches]
    if len({a.shape[1] for a in arrays}) != 1:
        raise ArgumentError(f"Inconsistent feature shapes: {[a.shape for a in arrays]}")
    samples = np.concatenate(arrays)
    sample_weights = np.concatenate([np.full(len(a), w) for a, w in zip(arrays, weights_arr, strict=True)])
    total = sample_weights.sum()
    mean = np.sum(sample_weights[:, None] * samples, axis=0) / total
    var = np.sum(sample_weights[:, None] * np.square(samples - mean), axis=0) / total
    return mean, var


class Offender(BaseModel):
    index: tuple[int, ...]
    analytic: float
    numeric: float
    abs_error: float


class GradReport(BaseModel):
    """Outcome of comparing an analytic gradient with a numeric one."""

    name: str = ""
    passed: bool
    max_abs_error: float
    max_rel_error: float
    failures: int
    worst: list[Offender] = Field(default_factory=list)

    def format_line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (
            f"{status:4} {self.name:<24} max_rel={self.max_rel_error:.3e} "
            f"max_abs={self.max_abs_error:.3e} failures={self.failures}"
        )


def compare_grads(
    analytic: npt.ArrayLike,
    numeric: npt.ArrayLike,
    rel_tol: float = DEFAULT_REL_TOL,
    abs_tol: float = DEFAULT_ABS_TOL,
    name: str = "",
    top: int = 3,
) -> GradReport:
    """Element passes when ``|a - n| <= abs_tol + rel_tol * max(|a|, |n|)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ArgumentError(f"Shape mismatch: analytic {a.shape} vs numeric {n.shape}")
    abs_err = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    failing = abs_err > abs_tol + rel_tol * scale
    rel_err = np.divide(abs_err, scale, out=np.zeros_like(abs_err), where=scale > 0)

    order = np.argsort(abs_err, axis=None)[::-1][:top]
    worst = [
        Offender(
            index=tuple(int(i) for i in np.unravel_index(flat, a.shape)),
            analytic=float(a.flat[flat]),
            numeric=float(n.flat[flat]),
            abs_error=float(abs_err.flat[flat]),
        )
        for flat in order
        if abs_err.flat[flat] > 0
    ]
    return GradReport(
        name=name,
        passed=not bool(np.any(failing)),
        max_abs_error=float(abs_err.max(initial=0.0)),
        max_rel_error=float(rel_err.max(initial=0.0)),
        failures=int(failing.sum()),
        worst=worst,
    )


def random_norm_layer(
    rng: np.random.Generator,
    mode: NormMode | str,
    features: int,
    memory_k: int,
    lam: float,
    eta: float = 0.9,
) -> NormLayer:
    """Layer with random gamma/beta and, depending on the mode, random memory or moving statistics."""
    mode = NormMode(mode)
    bounds = (3.0, 5.0) if mode is NormMode.BRN else (1.0, 0.0)
    layer = NormLayer(features, mode, memory_k=memory_k, eta=eta, lam=lam, brn_bounds=bounds)
    layer.gamma.value = rng.uniform(0.5, 1.5, features)
    layer.beta.value = rng.normal(size=features)
    for _ in range(memory_k):
        stats = BatchStats(
            mean=rng.normal(size=features),
            var=rng.uniform(0.5, 2.0, features),
            count=int(rng.integers(2, 9)),
        )
        layer.record(stats)
    if mode is NormMode.BRN:
        layer.record(BatchStats(mean=rng.normal(size=features), var=rng.uniform(0.5, 2.0, features), count=4))
    return layer


def check_norm_layer(
    layer: NormLayer,
    x: Tensor,
    grad_y: Tensor,
    h: float = DEFAULT_STEP,
    rel_tol: float = DEFAULT_REL_TOL,
    abs_tol: float = DEFAULT_ABS_TOL,
) -> list[GradReport]:
    """Compare the layer's analytic gradients with finite differences of ``<grad_y, forward(x)>``."""
    layer.forward(x, grad_pass=True)
    cache = layer.cache
    assert cache is not None
    rd = (cache.r, cache.d) if layer.mode is NormMode.BRN else None
    grad_x = layer.backward(grad_y)
    grad_gamma, grad_beta = layer.gamma.grad.copy(), layer.beta.grad.copy()

    def loss_at(trial: NormLayer, inputs: Tensor) -> float:
        if rd is not None:
            out = brn_forward_train(inputs, trial, grad_pass=False, record=False, rd=(rd[0], rd[1]))
        else:
            out = trial.forward(inputs, grad_pass=False)
        return float(np.sum(grad_y * out))

    trial = copy.deepcopy(layer)

    def with_gamma(gamma: Tensor) -> float:
        trial.gamma.value = gamma
        return loss_at(trial, x)

    def with_beta(beta: Tensor) -> float:
        trial.beta.value = beta
        return loss_at(trial, x)

    numeric_x = fd_gradient(lambda inputs: loss_at(trial, inputs), x, h)
    numeric_gamma = fd_gradient(with_gamma, layer.gamma.value, h)
    trial.gamma.value = layer.gamma.value.copy()
    numeric_beta = fd_gradient(with_beta, layer.beta.value, h)
    return [
        compare_grads(grad_x, numeric_x, rel_tol, abs_tol, name=f"{layer.mode.value}.input"),
        compare_grads(grad_gamma, numeric_gamma, rel_tol, abs_tol, name=f"{layer.mode.value}.gamma"),
        compare_grads(grad_beta, numeric_beta, rel_tol, abs_tol, name=f"{layer.mode.value}.beta"),
    ]


def check_bn_reduction(layer: NormLayer, x: Tensor, grad_y: Tensor, tol: float = REDUCTION_TOL) -> list[GradReport]:
    """Compare an mbn/movnorm layer that should collapse to BN against an actual BN layer."""
    reference = NormLayer(layer.num_features, NormMode.BN, eps=layer.eps)
    reference.gamma.value = layer.gamma.value.copy()
    reference.beta.value = layer.beta.value.copy()

    y = layer.forward(x, grad_pass=True)
    grad_x = layer.backward(grad_y)
    y_ref = bn_forward_train(x, reference, grad_pass=True, record=False)
    grad_x_ref, grad_gamma_ref, grad_beta_ref = bn_backward(grad_y, reference)
    return [
        compare_grads(y, y_ref, 0.0, tol, name="reduction.output"),
        compare_grads(grad_x, grad_x_ref, 0.0, tol, name="reduction.input"),
        compare_grads(layer.gamma.grad, grad_gamma_ref, 0.0, tol, name="reduction.gamma"),
        compare_grads(layer.beta.grad, grad_beta_ref, 0.0, tol, name="reduction.beta"),
    ]


def draw_inputs(rng: np.random.Generator, batch: int, features: int, min_spread: float = MIN_SPREAD) -> Tensor:
    """Random ``(batch, features)`` inputs scaled by a factor in [1, 2].

    Columns of a multi-row batch whose standard deviation falls below ``min_spread`` are stretched about their
    mean up to it, keeping the finite-difference step small against the normalized spread.
    """
    x = rng.normal(size=(batch, features)) * rng.uniform(1.0, 2.0)
    if batch < 2:
        return x
    spread = x.std(axis=0)
    while np.any(spread == 0.0):
        x[:, spread == 0.0] = rng.normal(size=(batch, int(np.count_nonzero(spread == 0.0))))
        spread = x.std(axis=0)
    mean = x.mean(axis=0)
    return mean + (x - mean) * np.maximum(1.0, min_spread / spread)


def gradcheck_layer(
    mode: NormMode | str,
    *,
    batch: int = 4,
    features: int = 3,
    memory_k: int = 3,
    lam: float = 0.5,
    seed: int = 0,
    instances: int = 20,
    rel_tol: float = DEFAULT_REL_TOL,
) -> list[GradReport]:
    """Finite-difference check of one normalization mode on ``instances`` random problems.

    With ``lam == 0`` mbn and movnorm are additionally compared against BN.
    """
    mode = NormMode(mode)
    rng = np.random.default_rng(seed)
    reports: list[GradReport] = []
    for i in range(instances):
        layer = random_norm_layer(rng, mode, features, memory_k, lam)
        x = draw_inputs(rng, batch, features)
        grad_y = rng.normal(size=(batch, features))
        instance_reports = check_norm_layer(layer, x, grad_y, rel_tol=rel_tol)
        if lam == 0.0 and mode in (NormMode.MBN, NormMode.MOVNORM):
            instance_reports += check_bn_reduction(layer, x, grad_y)
        for report in instance_reports:
            report.name = f"{report.name}#{i}"
        failed = sum(not r.passed for r in instance_reports)
        logger.debug("%s instance %d: %d checks, %d failed", mode.value, i, len(instance_reports), failed)
        reports.extend(instance_reports)
    return reports


def gradcheck_network(
    net: Network,
    x: Tensor,
    labels: npt.ArrayLike,
    h: float = DEFAULT_STEP,
    rel_tol: float = NETWORK_REL_TOL,
    abs_tol: float = DEFAULT_ABS_TOL,
) -> list[GradReport]:
    """Check every parameter gradient and the input gradient of ``softmax_xent(net(x))``."""

    def loss_of(inputs: Tensor) -> float:
        return softmax_xent(net.forward(inputs, ForwardMode.TRAIN_GRAD), labels)[0]

    reports = []
    for param in net.parameters():
        original = param.value.copy()

        def with_param(value: Tensor, param=param) -> float:
            param.value = value
            return loss_of(x)

        numeric = fd_gradient(with_param, original, h)
        param.value = original
        reports.append((param.name, numeric))
    numeric_input = fd_gradient(loss_of, x, h)

    _, grad_logits = softmax_xent(net.forward(x, ForwardMode.TRAIN_GRAD), labels)
    grads = net.backward(grad_logits)
    out = [compare_grads(grads[name], numeric, rel_tol, abs_tol, name=name) for name, numeric in reports]
    out.append(compare_grads(grads["input"], numeric_input, rel_tol, abs_tol, name="input"))
    return out


def gradcheck_mlp(
    *,
    mode: NormMode | str = NormMode.MBN,
    batch: int = 6,
    features: int = 4,
    hidden: int = 5,
    num_classes: int = 3,
    memory_k: int = 3,
    lam: float = 0.5,
    seed: int = 0,
) -> list[GradReport]:
    """Whole-network check on a 2-layer MLP whose norm layer carries a random memory."""
    if NormMode(mode) is NormMode.BRN:
        raise ArgumentError("The whole-network check differentiates through r and d, so it cannot check brn")
    rng = np.random.default_rng(seed)
    net = build_mlp(features, num_classes, rng, hidden=hidden, depth=2, norm_mode=mode, memory_k=memory_k, lam=lam)
    for layer in net.norm_layers:
        for _ in range(memory_k):
            layer.record(BatchStats(mean=rng.normal(size=hidden), var=rng.uniform(0.5, 2.0, hidden), count=batch))
    x = rng.normal(size=(batch, features))
    labels = rng.integers(0, num_classes, size=batch)
    return gradcheck_network(net, x, labels)
