"""Dense float64 array helpers used by the layers and the statistics code."""

from collections.abc import Iterable
from typing import TypeAlias

import numpy as np
import numpy.typing as npt

from .errors import ArgumentError, DomainError

Tensor: TypeAlias = npt.NDArray[np.float64]


def as_tensor(data: npt.ArrayLike) -> Tensor:
    """Return a C-ordered float64 copy of ``data``."""
    return np.array(data, dtype=np.float64, order="C")


def _normalize_axes(ndim: int, axes: Iterable[int]) -> tuple[int, ...]:
    normalized: list[int] = []
    for axis in axes:
        if not -ndim <= axis < ndim:
            raise ArgumentError(f"Axis {axis} is out of range for a rank-{ndim} tensor")
        axis %= ndim
        if axis in normalized:
            raise ArgumentError(f"Axis {axis} listed more than once")
        normalized.append(axis)
    if not normalized:
        raise ArgumentError("reduce_axes must not be empty")
    return tuple(sorted(normalized))


def reduce_moments(x: Tensor, reduce_axes: Iterable[int]) -> tuple[Tensor, Tensor]:
    """Mean and population variance of ``x`` over ``reduce_axes``.

    The variance is computed in two passes, mean((x - mean)**2), so it is
    non-negative by construction.
    """
    x = np.asarray(x, dtype=np.float64)
    axes = _normalize_axes(x.ndim, reduce_axes)
    if any(x.shape[axis] == 0 for axis in axes):
        raise DomainError(f"Cannot reduce over an empty slice (shape {x.shape}, axes {axes})")
    mean = np.mean(x, axis=axes, keepdims=True)
    var = np.mean(np.square(x - mean), axis=axes, keepdims=True)
    return np.squeeze(mean, axis=axes), np.squeeze(var, axis=axes)


def affine(x: Tensor, scale: npt.ArrayLike, shift: npt.ArrayLike) -> Tensor:
    """Elementwise ``x * scale + shift`` with scale/shift broadcast to ``x``'s shape."""
    x = np.asarray(x, dtype=np.float64)
    try:
        scale_b = np.broadcast_to(np.asarray(scale, dtype=np.float64), x.shape)
        shift_b = np.broadcast_to(np.asarray(shift, dtype=np.float64), x.shape)
    except ValueError as e:
        raise ArgumentError(
            f"scale {np.shape(scale)} / shift {np.shape(shift)} do not broadcast to {x.shape}"
        ) from e
    return x * scale_b + shift_b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ArgumentError(f"matmul expects rank-2 operands, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ArgumentError(f"Inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def feature_axes(x: Tensor) -> tuple[int, ...]:
    """Axes reduced by normalization: batch for (N, D), batch and spatial for (N, C, H, W)."""
    if x.ndim == 2:
        return (0,)
    if x.ndim == 4:
        return (0, 2, 3)
    raise ArgumentError(f"Normalization expects a rank-2 or rank-4 tensor, got shape {x.shape}")


def count_per_feature(x: Tensor) -> int:
    """Number of elements contributing to each feature's statistics."""
    return int(np.prod([x.shape[axis] for axis in feature_axes(x)]))


def to_feature(v: Tensor, ndim: int) -> Tensor:
    """Reshape a per-feature vector so it broadcasts against a rank-``ndim`` activation."""
    if ndim == 2:
        return v.reshape(1, -1)
    return v.reshape(1, -1, 1, 1)


def sum_features(x: Tensor) -> Tensor:
    """Per-feature sum over the normalization axes, returned as a vector."""
    return np.sum(x, axis=feature_axes(x))


class Parameter:
    """Learnable tensor with its gradient slot."""

    def __init__(self, name: str, value: Tensor, decay: bool = True):
        self.name = name
        self.value = as_tensor(value)
        self.grad = np.zeros_like(self.value)
        self.decay = decay

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape}, decay={self.decay})"
