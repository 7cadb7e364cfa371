"""Configuration loading: flat ``key = value`` files, YAML files, overrides and the resolved dump."""

import logging
from collections.abc import Iterable, Mapping
from enum import Enum
from pathlib import Path
from typing import Any

import yaml
from pydantic import ValidationError

from .errors import ConfigError
from .models import RunConfig

logger = logging.getLogger(__name__)

YAML_SUFFIXES = {".yaml", ".yml"}


def parse_assignment(line: str, where: str) -> tuple[str, str]:
    """Split ``key = value`` (or ``key=value``) into stripped parts."""
    key, sep, value = line.partition("=")
    key, value = key.strip(), value.strip()
    if not sep or not key:
        raise ConfigError(f"{where}: expected 'key = value', got '{line.strip()}'")
    return key, value


def parse_flat(text: str, source: str = "<config>") -> dict[str, str]:
    """Dotted keys to raw string values; ``#`` starts a comment, blank lines are ignored."""
    values: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = parse_assignment(line, f"{source}:{line_no}")
        if key in values:
            logger.warning("%s:%d: '%s' set more than once, the last value wins", source, line_no, key)
        values[key] = value
    return values


def set_dotted(tree: dict[str, Any], key: str, value: Any) -> None:
    *sections, leaf = key.split(".")
    node = tree
    for section in sections:
        child = node.setdefault(section, {})
        if not isinstance(child, dict):
            raise ConfigError(f"'{key}': '{section}' is a value, not a section")
        node = child
    node[leaf] = value


def unflatten(values: Mapping[str, Any]) -> dict[str, Any]:
    tree: dict[str, Any] = {}
    for key, value in values.items():
        set_dotted(tree, key, value)
    return tree


def _format_errors(error: ValidationError) -> list[str]:
    return [f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in error.errors()]


def build_config(tree: Mapping[str, Any], source: str = "<config>") -> RunConfig:
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as e:
        raise ConfigError(f"{source}: invalid configuration:\n  " + "\n  ".join(_format_errors(e))) from e


def read_config_tree(config_file: Path) -> dict[str, Any]:
    """Raw nested mapping of a flat or YAML config file."""
    if not config_file.exists():
        raise ConfigError(f"Config file not found: {config_file}")
    text = config_file.read_text(encoding="utf-8")
    if config_file.suffix in YAML_SUFFIXES:
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"{config_file}: YAML syntax error: {e}") from e
        if data is None:
            return {}
        if not isinstance(data, dict):
            raise ConfigError(f"{config_file}: YAML root must be a mapping")
        return data
    return unflatten(parse_flat(text, str(config_file)))


def load_config(config_file: Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Load ``config_file`` (defaults when ``None``) and apply ``key=value`` overrides on top."""
    tree = read_config_tree(config_file) if config_file is not None else {}
    for override in overrides:
        key, value = parse_assignment(override, "--set")
        set_dotted(tree, key, value)
    return build_config(tree, str(config_file or "<defaults>"))


def apply_overrides(config: RunConfig, overrides: Mapping[str, str]) -> RunConfig:
    """Copy of ``config`` with dotted ``overrides`` applied and revalidated."""
    flat = flatten(config)
    flat.update(overrides)
    return build_config(unflatten(flat), "<overrides>")


def format_text(value: Any) -> str:
    """Text form of a config value as written in flat config files."""
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ":".join(format_text(v) for v in value)
    if isinstance(value, list):
        return ",".join(format_text(item) for item in value)
    return str(value)


def _walk(prefix: str, data: Mapping[str, Any], out: dict[str, str]) -> None:
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            _walk(f"{dotted}.", value, out)
        elif value is not None:
            out[dotted] = format_text(value)


def flatten(config: RunConfig) -> dict[str, str]:
    """Every set field of ``config`` as dotted key to text; ``None`` fields are omitted."""
    out: dict[str, str] = {}
    _walk("", config.model_dump(), out)
    return out


def dump_resolved(config: RunConfig) -> str:
    """Sorted flat dump that ``load_config`` reads back into an equal ``RunConfig``."""
    return "".join(f"{key} = {value}\n" for key, value in sorted(flatten(config).items()))


def write_resolved(config: RunConfig, path: Path) -> None:
    path.write_text(dump_resolved(config), encoding="utf-8")
