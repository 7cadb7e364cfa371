"""Configuration models for training runs and the statistics bench."""

from enum import Enum
from pathlib import Path
from typing import Annotated, Literal

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, field_validator, model_validator

from .norm import DEFAULT_EPS, NormMode
from .stats import DEFAULT_ETA, DEFAULT_LAMBDA, DEFAULT_MEMORY_K, DEFAULT_THETA


class ForwardScheme(str, Enum):
    SINGLE = "single"
    DOUBLE = "double"


def _split_list(value: object) -> object:
    """Accept ``"a,b,c"`` text as well as native lists."""
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    if isinstance(value, int | float):
        return [value]
    return value


def _split_pairs(value: object) -> object:
    """Accept ``"0:0.1,0.4:0.5"`` text as well as lists of pairs."""
    if isinstance(value, str):
        pairs = []
        for item in _split_list(value):  # type: ignore[union-attr]
            fraction, sep, setting = item.partition(":")
            if not sep:
                raise ValueError(f"Schedule entry '{item}' must look like fraction:value")
            pairs.append((fraction, setting))
        return pairs
    return value


IntList = Annotated[list[int], BeforeValidator(_split_list)]
FloatList = Annotated[list[float], BeforeValidator(_split_list)]
Schedule = Annotated[list[tuple[float, float]], BeforeValidator(_split_pairs)]


def _check_fractions(fractions: list[float], what: str) -> None:
    if any(not 0.0 <= f < 1.0 for f in fractions):
        raise ValueError(f"{what} fractions must lie in [0, 1), got {fractions}")
    if any(b <= a for a, b in zip(fractions, fractions[1:], strict=False)):
        raise ValueError(f"{what} fractions must be strictly increasing, got {fractions}")


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    source: Literal["blobs", "idx", "csv"] = "blobs"
    num_classes: int = Field(default=10, ge=2)
    n_per_class: int = Field(default=200, ge=1, description="Training samples per class (blobs)")
    test_per_class: int = Field(default=100, ge=1, description="Test samples per class (blobs)")
    dim: int = Field(default=32, ge=1)
    class_separation: float = Field(default=0.5, gt=0.0)
    drift_per_batch: float = Field(default=0.0, ge=0.0)
    train_images: Path | None = None
    train_labels: Path | None = None
    test_images: Path | None = None
    test_labels: Path | None = None
    train_csv: Path | None = None
    test_csv: Path | None = None
    standardize: bool = False
    limit: int | None = Field(default=None, ge=1, description="Keep only the first N samples of each split")

    @model_validator(mode="after")
    def check_paths(self) -> "DataConfig":
        if self.source == "idx":
            missing = [
                name
                for name in ("train_images", "train_labels", "test_images", "test_labels")
                if getattr(self, name) is None
            ]
            if missing:
                raise ValueError(f"data.source = idx needs {', '.join('data.' + m for m in missing)}")
        if self.source == "csv" and (self.train_csv is None or self.test_csv is None):
            raise ValueError("data.source = csv needs data.train_csv and data.test_csv")
        return self


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    arch: Literal["mlp", "cnn"] = "mlp"
    hidden: int = Field(default=64, ge=1)
    depth: int = Field(default=4, ge=1, description="Number of dense layers")
    channels: IntList = Field(default_factory=lambda: [8, 16])


class NormConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: NormMode = NormMode.MBN
    eps: float = Field(default=DEFAULT_EPS, gt=0.0)
    theta: float = Field(default=DEFAULT_THETA, gt=0.0, le=1.0)
    memory_k: int = Field(default=DEFAULT_MEMORY_K, ge=0)
    eta: float = Field(default=DEFAULT_ETA, gt=0.0, le=1.0)
    brn_r_max: float = Field(default=3.0, ge=1.0)
    brn_d_max: float = Field(default=5.0, ge=0.0)
    brn_ramp_start: float = Field(default=0.2, ge=0.0, le=1.0)
    brn_ramp_end: float = Field(default=0.4, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def check_ramp(self) -> "NormConfig":
        if self.brn_ramp_end < self.brn_ramp_start:
            raise ValueError(f"norm.brn_ramp_end {self.brn_ramp_end} precedes brn_ramp_start {self.brn_ramp_start}")
        return self


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr0: float = Field(default=0.1, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    batch_size: int = Field(default=128, ge=1)
    total_epochs: int = Field(default=30, ge=0)
    lr_drops: FloatList = Field(default_factory=lambda: [0.4, 0.6])
    lambda_schedule: Schedule = Field(default_factory=lambda: [(0.0, DEFAULT_LAMBDA), (0.4, 0.5), (0.6, 0.9)])
    forward_scheme: ForwardScheme = ForwardScheme.DOUBLE
    drop_last: bool = False
    track_staleness: bool = True

    @field_validator("lr_drops")
    @classmethod
    def check_drops(cls, v: list[float]) -> list[float]:
        _check_fractions(v, "train.lr_drops")
        return v

    @field_validator("lambda_schedule")
    @classmethod
    def check_lambda_schedule(cls, v: list[tuple[float, float]]) -> list[tuple[float, float]]:
        if not v:
            raise ValueError("train.lambda_schedule must have at least one entry")
        fractions = [f for f, _ in v]
        _check_fractions(fractions, "train.lambda_schedule")
        if fractions[0] != 0.0:
            raise ValueError(f"train.lambda_schedule must start at fraction 0, got {fractions[0]}")
        if any(not 0.0 <= lam <= 1.0 for _, lam in v):
            raise ValueError(f"lambda values must lie in [0, 1], got {[lam for _, lam in v]}")
        return v


class BenchConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    batch_sizes: IntList = Field(default_factory=lambda: [8, 16, 32, 64, 128])
    trials: int = Field(default=100, ge=1)
    num_batches: int = Field(default=40, ge=1, description="Stream length per trial")
    dim: int = Field(default=16, ge=1)
    drift: float = Field(default=0.0, ge=0.0, description="Shift of the true mean per batch")
    scale: float = Field(default=1.0, gt=0.0, description="Standard deviation of the generating distribution")
    memory_k: int = Field(default=DEFAULT_MEMORY_K, ge=0)
    lam: float = Field(default=1.0, ge=0.0, le=1.0)
    eta: float = Field(default=1.0, gt=0.0, le=1.0)
    theta: float = Field(default=DEFAULT_THETA, gt=0.0, le=1.0)

    @field_validator("batch_sizes")
    @classmethod
    def check_sizes(cls, v: list[int]) -> list[int]:
        if not v or any(size < 1 for size in v):
            raise ValueError(f"bench.batch_sizes must be positive, got {v}")
        return v


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default=1, ge=0)
    out: Path = Field(default=Path("runs"), description="Output directory")
    tag: str = Field(default="", description="Suffix appended to the method column")
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    norm: NormConfig = Field(default_factory=NormConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)

    @property
    def method(self) -> str:
        method = f"{self.norm.mode.value}-{self.train.forward_scheme.value}"
        return f"{method}[{self.tag}]" if self.tag else method
