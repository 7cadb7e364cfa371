"""Layers, sequential network and softmax cross-entropy loss."""

import logging
from collections.abc import Sequence
from enum import Enum
from typing import Protocol

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, StateError
from .norm import NormLayer, NormMode
from .stats import BatchStats
from .tensor import Parameter, Tensor, as_tensor, matmul

logger = logging.getLogger(__name__)


class ForwardMode(str, Enum):
    TRAIN_GRAD = "train_grad"
    STATS_ONLY = "stats_only"
    EVAL = "eval"


class Layer(Protocol):
    name: str

    def forward(self, x: Tensor, *, grad_pass: bool = True) -> Tensor: ...

    def evaluate(self, x: Tensor) -> Tensor: ...

    def backward(self, grad_y: Tensor) -> Tensor: ...

    def parameters(self) -> list[Parameter]: ...


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Dense:
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, name: str = "dense"):
        self.name = name
        self.weight = Parameter(f"{name}.weight", he_normal(rng, (in_features, out_features), in_features))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_features))
        self._x: Tensor | None = None

    def forward(self, x: Tensor, *, grad_pass: bool = True) -> Tensor:
        self._x = x if grad_pass else None
        return self.evaluate(x)

    def evaluate(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.weight.value.shape[0]:
            raise ArgumentError(f"{self.name}: expected (N, {self.weight.value.shape[0]}) input, got {x.shape}")
        return matmul(x, self.weight.value) + self.bias.value

    def backward(self, grad_y: Tensor) -> Tensor:
        if self._x is None:
            raise StateError(f"{self.name}: backward called without a gradient-pass forward")
        self.weight.grad = matmul(self._x.T, grad_y)
        self.bias.grad = np.sum(grad_y, axis=0)
        return matmul(grad_y, self.weight.value.T)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class ReLU:
    def __init__(self, name: str = "relu"):
        self.name = name
        self._mask: npt.NDArray[np.bool_] | None = None

    def forward(self, x: Tensor, *, grad_pass: bool = True) -> Tensor:
        mask = x > 0
        self._mask = mask if grad_pass else None
        return np.where(mask, x, 0.0)

    def evaluate(self, x: Tensor) -> Tensor:
        return np.where(x > 0, x, 0.0)

    def backward(self, grad_y: Tensor) -> Tensor:
        if self._mask is None:
            raise StateError(f"{self.name}: backward called without a gradient-pass forward")
        return np.where(self._mask, grad_y, 0.0)

    def parameters(self) -> list[Parameter]:
        return []


class Conv2d:
    """3x3 convolution, stride 1, zero padding 1, computed as an im2col matrix product."""

    KERNEL = 3

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, name: str = "conv"):
        self.name = name
        fan_in = in_channels * self.KERNEL * self.KERNEL
        self.weight = Parameter(
            f"{name}.weight", he_normal(rng, (out_channels, in_channels, self.KERNEL, self.KERNEL), fan_in)
        )
        self.bias = Parameter(f"{name}.bias", np.zeros(out_channels))
        self._cols: Tensor | None = None
        self._in_shape: tuple[int, ...] | None = None

    def _im2col(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.weight.value.shape[1]:
            raise ArgumentError(f"{self.name}: expected (N, {self.weight.value.shape[1]}, H, W) input, got {x.shape}")
        n, c, h, w = x.shape
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        windows = sliding_window_view(padded, (self.KERNEL, self.KERNEL), axis=(2, 3))
        # (N, C, H, W, 3, 3) -> rows per output pixel, columns ordered like weight[o].ravel()
        return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * self.KERNEL * self.KERNEL)

    def _apply(self, cols: Tensor, shape: tuple[int, ...]) -> Tensor:
        n, _, h, w = shape
        out_channels = self.weight.value.shape[0]
        out = matmul(cols, self.weight.value.reshape(out_channels, -1).T) + self.bias.value
        return out.reshape(n, h, w, out_channels).transpose(0, 3, 1, 2)

    def forward(self, x: Tensor, *, grad_pass: bool = True) -> Tensor:
        cols = self._im2col(x)
        self._cols = cols if grad_pass else None
        self._in_shape = x.shape if grad_pass else None
        return self._apply(cols, x.shape)

    def evaluate(self, x: Tensor) -> Tensor:
        return self._apply(self._im2col(x), x.shape)

    def backward(self, grad_y: Tensor) -> Tensor:
        if self._cols is None or self._in_shape is None:
            raise StateError(f"{self.name}: backward called without a gradient-pass forward")
        n, c, h, w = self._in_shape
        k = self.KERNEL
        out_channels = self.weight.value.shape[0]
        rows = grad_y.transpose(0, 2, 3, 1).reshape(n * h * w, out_channels)
        self.weight.grad = matmul(rows.T, self._cols).reshape(self.weight.value.shape)
        self.bias.grad = np.sum(rows, axis=0)

        grad_cols = matmul(rows, self.weight.value.reshape(out_channels, -1)).reshape(n, h, w, c, k, k)
        grad_padded = np.zeros((n, c, h + 2, w + 2))
        for i in range(k):
            for j in range(k):
                grad_padded[:, :, i : i + h, j : j + w] += grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return grad_padded[:, :, 1:-1, 1:-1]

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class Flatten:
    def __init__(self, name: str = "flatten"):
        self.name = name
        self._shape: tuple[int, ...] | None = None

    def forward(self, x: Tensor, *, grad_pass: bool = True) -> Tensor:
        self._shape = x.shape if grad_pass else None
        return self.evaluate(x)

    def evaluate(self, x: Tensor) -> Tensor:
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_y: Tensor) -> Tensor:
        if self._shape is None:
            raise StateError(f"{self.name}: backward called without a gradient-pass forward")
        return grad_y.reshape(self._shape)

    def parameters(self) -> list[Parameter]:
        return []


class Network:
    """Sequential stack of layers with train-grad, stats-only and eval forward modes."""

    def __init__(self, layers: Sequence[Layer], input_shape: tuple[int, ...]):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        modes = {layer.mode for layer in self.norm_layers}
        if len(modes) > 1:
            raise ArgumentError(f"All normalization layers must share one mode, got {sorted(m.value for m in modes)}")
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise ArgumentError("Parameter names must be unique")
        self._grad_ready = False

    @property
    def norm_layers(self) -> list[NormLayer]:
        return [layer for layer in self.layers if isinstance(layer, NormLayer)]

    @property
    def norm_mode(self) -> NormMode | None:
        norms = self.norm_layers
        return norms[0].mode if norms else None

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x: Tensor, mode: ForwardMode = ForwardMode.EVAL) -> Tensor:
        if x.shape[1:] != self.input_shape:
            raise ArgumentError(f"Expected input of shape (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        out = as_tensor(x)
        mode = ForwardMode(mode)
        for layer in self.layers:
            if mode is ForwardMode.EVAL:
                out = layer.evaluate(out)
            else:
                out = layer.forward(out, grad_pass=mode is ForwardMode.TRAIN_GRAD)
        self._grad_ready = mode is ForwardMode.TRAIN_GRAD
        return out

    def backward(self, grad_out: Tensor) -> dict[str, Tensor]:
        """Gradients of every parameter (by name) plus ``"input"`` for the network input."""
        if not self._grad_ready:
            raise StateError("backward needs a preceding train_grad forward on the same batch")
        grad = grad_out
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        grads = {p.name: p.grad for p in self.parameters()}
        grads["input"] = grad
        return grads

    def batch_stats(self) -> list[BatchStats]:
        """Fresh statistics each norm layer computed in the last non-eval forward."""
        stats = [layer.batch_stats for layer in self.norm_layers]
        if any(s is None for s in stats):
            raise StateError("No batch statistics available, run a training or stats-only forward first")
        return [s for s in stats if s is not None]

    def record(self, stats: Sequence[BatchStats]) -> None:
        norms = self.norm_layers
        if len(stats) != len(norms):
            raise ArgumentError(f"Got {len(stats)} statistics for {len(norms)} normalization layers")
        for layer, s in zip(norms, stats, strict=True):
            layer.record(s)

    def stats_ready(self) -> bool:
        return all(layer.stats_ready() for layer in self.norm_layers)

    def set_lambda(self, lam: float) -> None:
        for layer in self.norm_layers:
            layer.set_lambda(lam)

    def set_brn_bounds(self, bounds: tuple[float, float]) -> None:
        for layer in self.norm_layers:
            layer.brn_bounds = bounds


def forward(net: Network, x: Tensor, mode: ForwardMode = ForwardMode.EVAL) -> Tensor:
    return net.forward(x, mode)


def backward(net: Network, grad_out: Tensor) -> dict[str, Tensor]:
    return net.backward(grad_out)


def softmax_xent(logits: Tensor, labels: npt.ArrayLike) -> tuple[float, Tensor]:
    """Mean cross-entropy with log-sum-exp stabilization and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ArgumentError(f"logits must be (N, C), got {logits.shape}")
    n, num_classes = logits.shape
    if labels.shape != (n,):
        raise ArgumentError(f"Expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        raise ArgumentError(f"Labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")

    shifted = logits - np.max(logits, axis=1, keepdims=True)
    log_probs = shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    rows = np.arange(n)
    loss = float(-np.mean(log_probs[rows, labels]))
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return loss, grad / n


def error_rate(logits: Tensor, labels: npt.ArrayLike) -> float:
    return float(np.mean(np.argmax(logits, axis=1) != np.asarray(labels)))


def build_mlp(
    input_dim: int,
    num_classes: int,
    rng: np.random.Generator,
    *,
    hidden: int = 64,
    depth: int = 4,
    norm_mode: NormMode | str | None = NormMode.BN,
    **norm_kwargs: object,
) -> Network:
    """``depth`` dense layers; every hidden dense is followed by normalization and ReLU."""
    if depth < 1:
        raise ArgumentError(f"depth must be >= 1, got {depth}")
    layers: list[Layer] = []
    width = input_dim
    for i in range(depth - 1):
        layers.append(Dense(width, hidden, rng, name=f"dense{i}"))
        if norm_mode is not None:
            layers.append(NormLayer(hidden, norm_mode, name=f"norm{i}", **norm_kwargs))  # type: ignore[arg-type]
        layers.append(ReLU(name=f"relu{i}"))
        width = hidden
    layers.append(Dense(width, num_classes, rng, name=f"dense{depth - 1}"))
    logger.debug("Built MLP: %s", [layer.name for layer in layers])
    return Network(layers, (input_dim,))


def build_cnn(
    input_shape: tuple[int, int, int],
    num_classes: int,
    rng: np.random.Generator,
    *,
    channels: Sequence[int] = (8, 16),
    norm_mode: NormMode | str | None = NormMode.BN,
    **norm_kwargs: object,
) -> Network:
    """Conv-norm-ReLU blocks followed by a dense classifier."""
    in_channels, height, width = input_shape
    layers: list[Layer] = []
    for i, out_channels in enumerate(channels):
        layers.append(Conv2d(in_channels, out_channels, rng, name=f"conv{i}"))
        if norm_mode is not None:
            layers.append(NormLayer(out_channels, norm_mode, name=f"norm{i}", **norm_kwargs))  # type: ignore[arg-type]
        layers.append(ReLU(name=f"relu{i}"))
        in_channels = out_channels
    layers.append(Flatten())
    layers.append(Dense(in_channels * height * width, num_classes, rng, name="dense"))
    return Network(layers, input_shape)
