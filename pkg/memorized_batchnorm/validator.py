from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from pydantic import ValidationError

from .config import read_config_tree
from .errors import ConfigError
from .models import RunConfig
from .norm import MEMORY_MODES, NormMode


@dataclass
class ValidationResult:
    """Errors and warnings collected while checking one run configuration."""

    is_valid: bool
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    source: Path | None = None

    def add_error(self, error: str) -> None:
        self.errors.append(error)
        self.is_valid = False

    def add_warning(self, warning: str) -> None:
        self.warnings.append(warning)

    def add_pydantic_errors(self, exc: ValidationError) -> None:
        """One ``Field 'section.key': message`` error per failed field."""
        for error in exc.errors():
            message = error["msg"].removeprefix("Value error, ")
            if error["loc"]:
                self.add_error(f"Field '{'.'.join(str(loc) for loc in error['loc'])}': {message}")
            else:
                self.add_error(message)

    def format_report(self, quiet: bool = False) -> str:
        """Human-readable report; ``quiet`` keeps only the errors."""
        if quiet:
            return "\n".join(f"ERROR: {error}" for error in self.errors)

        where = f" ({self.source})" if self.source is not None else ""
        lines = [f"✅ Config validation passed{where}" if self.is_valid else f"❌ Config validation failed{where}"]
        for title, items in (("Errors", self.errors), ("Warnings", self.warnings)):
            if items:
                lines.append(f"\n{title} ({len(items)}):")
                lines.extend(f"  {i}. {item}" for i, item in enumerate(items, 1))
        return "\n".join(lines)


def validate_tree(data: dict[str, Any], source: Path | None = None) -> ValidationResult:
    """Validate a nested config mapping with the pydantic models, then check cross-field consistency."""
    result = ValidationResult(True, source=source)
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        result.add_pydantic_errors(e)
        return result

    _check_consistency(config, result)
    return result


def _check_consistency(config: RunConfig, result: ValidationResult):
    mode = config.norm.mode
    if mode in MEMORY_MODES and config.norm.memory_k == 0:
        result.add_warning(f"norm.memory_k = 0 makes norm.mode = {mode.value} behave like plain batch statistics")
    if mode is not NormMode.BRN and (config.norm.brn_r_max != 3.0 or config.norm.brn_d_max != 5.0):
        result.add_warning(f"norm.brn_* settings have no effect with norm.mode = {mode.value}")
    if config.train.total_epochs == 0:
        result.add_warning("train.total_epochs = 0: only the initial evaluation will run")

    data = config.data
    if data.source == "blobs":
        samples = data.n_per_class * data.num_classes
        if data.limit is not None:
            samples = min(samples, data.limit)
        if config.train.batch_size > samples:
            message = f"train.batch_size {config.train.batch_size} exceeds the {samples} training samples"
            if config.train.drop_last:
                result.add_error(f"{message}; with train.drop_last every epoch would be empty")
            else:
                result.add_warning(message)
    if config.model.arch == "cnn" and data.source != "idx":
        result.add_error(f"model.arch = cnn needs image data (data.source = idx), got data.source = {data.source}")
    for name in ("train_images", "train_labels", "test_images", "test_labels", "train_csv", "test_csv"):
        path = getattr(data, name)
        if path is not None and not path.exists():
            result.add_error(f"data.{name}: file not found: {path}")


def validate_config_file(config_path: Path) -> ValidationResult:
    """Validate a flat or YAML configuration file."""
    try:
        data = read_config_tree(config_path)
    except ConfigError as e:
        result = ValidationResult(False, source=config_path)
        result.add_error(str(e))
        return result
    return validate_tree(data, source=config_path)
