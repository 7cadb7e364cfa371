"""Single-file checkpoints of network parameters and normalization statistics.

Layout::

    8 bytes   magic b"MBNCKPT\\n"
    4 bytes   little-endian uint32 length L of the header
    L bytes   UTF-8 JSON ``CheckpointHeader``
    ...       little-endian float64 buffers, contiguous, at the byte offsets listed in the header

Entry names are ``<param name>`` for learnable tensors and ``<layer>.<store>.<field>`` for statistics,
e.g. ``norm0.moving.mean``, ``norm0.memorized.var`` or ``norm0.memory.3.count``.
"""

import logging
import struct
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from .errors import FormatError
from .net import Network
from .norm import NormLayer
from .stats import BatchStats

logger = logging.getLogger(__name__)

MAGIC = b"MBNCKPT\n"
VERSION = 1
_LENGTH = struct.Struct("<I")
_DTYPE = np.dtype("<f8")


class CheckpointEntry(BaseModel):
    name: str
    shape: list[int]
    offset: int = Field(ge=0, description="Byte offset from the start of the data section")


class CheckpointHeader(BaseModel):
    version: int
    entries: list[CheckpointEntry] = Field(default_factory=list)


def _norm_buffers(layer: NormLayer) -> dict[str, np.ndarray]:
    buffers: dict[str, np.ndarray] = {}
    if layer.moving is not None and layer.moving.initialized:
        assert layer.moving.mean is not None and layer.moving.var is not None
        buffers[f"{layer.name}.moving.mean"] = layer.moving.mean
        buffers[f"{layer.name}.moving.var"] = layer.moving.var
    if layer.memorized is not None:
        buffers[f"{layer.name}.memorized.mean"], buffers[f"{layer.name}.memorized.var"] = layer.memorized
    if layer.memory is not None:
        for i, entry in enumerate(layer.memory):
            buffers[f"{layer.name}.memory.{i}.mean"] = entry.mean
            buffers[f"{layer.name}.memory.{i}.var"] = entry.var
            buffers[f"{layer.name}.memory.{i}.count"] = np.array([entry.count], dtype=np.float64)
    return buffers


def network_buffers(net: Network) -> dict[str, np.ndarray]:
    buffers = {p.name: p.value for p in net.parameters()}
    for layer in net.norm_layers:
        buffers.update(_norm_buffers(layer))
    return buffers


def save_checkpoint(net: Network, path: Path) -> None:
    header = CheckpointHeader(version=VERSION)
    chunks: list[bytes] = []
    offset = 0
    for name, value in network_buffers(net).items():
        data = np.ascontiguousarray(value, dtype=_DTYPE).tobytes()
        header.entries.append(CheckpointEntry(name=name, shape=list(np.shape(value)), offset=offset))
        chunks.append(data)
        offset += len(data)
    encoded = header.model_dump_json().encode("utf-8")
    with path.open("wb") as f:
        f.write(MAGIC)
        f.write(_LENGTH.pack(len(encoded)))
        f.write(encoded)
        for chunk in chunks:
            f.write(chunk)
    logger.info("Wrote checkpoint with %d entries to %s", len(header.entries), path)


def read_checkpoint(path: Path) -> dict[str, np.ndarray]:
    """Buffers of a checkpoint file by entry name."""
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[: len(MAGIC)]!r}")
    start = len(MAGIC)
    if len(raw) < start + _LENGTH.size:
        raise FormatError(f"{path}: truncated header length")
    (length,) = _LENGTH.unpack_from(raw, start)
    start += _LENGTH.size
    try:
        header = CheckpointHeader.model_validate_json(raw[start : start + length])
    except ValidationError as e:
        raise FormatError(f"{path}: invalid header: {e}") from e
    if header.version != VERSION:
        raise FormatError(f"{path}: unsupported version {header.version}, expected {VERSION}")

    data = memoryview(raw)[start + length :]
    buffers: dict[str, np.ndarray] = {}
    for entry in header.entries:
        size = int(np.prod(entry.shape, dtype=np.int64)) * _DTYPE.itemsize
        if entry.offset + size > len(data):
            raise FormatError(f"{path}: entry {entry.name} runs past the end of the file")
        chunk = data[entry.offset : entry.offset + size]
        buffers[entry.name] = np.frombuffer(chunk, dtype=_DTYPE).astype(np.float64).reshape(entry.shape)
    return buffers


def _take(buffers: dict[str, np.ndarray], name: str, shape: tuple[int, ...], path: Path) -> np.ndarray:
    if name not in buffers:
        raise FormatError(f"{path}: missing entry {name}")
    value = buffers[name]
    if value.shape != shape:
        raise FormatError(f"{path}: entry {name} has shape {value.shape}, network expects {shape}")
    return value


def load_checkpoint(net: Network, path: Path) -> Network:
    """Restore parameters and statistics saved by ``save_checkpoint`` into a network of the same architecture."""
    buffers = read_checkpoint(path)
    for param in net.parameters():
        param.value = _take(buffers, param.name, param.value.shape, path).copy()

    for layer in net.norm_layers:
        features = (layer.num_features,)
        prefix = layer.name
        if layer.moving is not None and f"{prefix}.moving.mean" in buffers:
            layer.moving = layer.moving.model_copy(
                update={
                    "mean": _take(buffers, f"{prefix}.moving.mean", features, path).copy(),
                    "var": _take(buffers, f"{prefix}.moving.var", features, path).copy(),
                }
            )
        if f"{prefix}.memorized.mean" in buffers:
            layer.memorized = (
                _take(buffers, f"{prefix}.memorized.mean", features, path).copy(),
                _take(buffers, f"{prefix}.memorized.var", features, path).copy(),
            )
        if layer.memory is not None:
            layer.memory.clear()
            i = 0
            while f"{prefix}.memory.{i}.mean" in buffers:
                layer.memory.push(
                    BatchStats(
                        mean=_take(buffers, f"{prefix}.memory.{i}.mean", features, path),
                        var=_take(buffers, f"{prefix}.memory.{i}.var", features, path),
                        count=int(_take(buffers, f"{prefix}.memory.{i}.count", (1,), path)[0]),
                    )
                )
                i += 1
    logger.info("Loaded checkpoint %s", path)
    return net
