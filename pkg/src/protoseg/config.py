"""Flat key=value run configuration files.

Precedence: built-in defaults < config file < command-line flags. The resolved
configuration is written into the run directory so every run is reproducible
from its artifacts alone.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .trainer import TrainConfig

RESOLVED_NAME = "resolved_config.txt"

_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


class ConfigError(ValueError):
    """A config file line or value could not be interpreted."""


def _convert(name: str, raw: str, target_type: type) -> object:
    raw = raw.strip()
    if target_type is bool:
        word = raw.lower()
        if word not in _BOOL_WORDS:
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
        return _BOOL_WORDS[word]
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
    except ValueError as err:
        raise ConfigError(f"{name}: expected {target_type.__name__}, got {raw!r}") from err
    return raw


def _field_types() -> dict[str, type]:
    types = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name == "labeled_scans":
            types[f.name] = int  # declared Optional; file values are plain ints
        else:
            types[f.name] = f.type if isinstance(f.type, type) else type(f.default)
    return types


def parse_config_file(path: Path | str) -> dict[str, object]:
    """Read key=value lines; '#' starts a comment, blank lines are skipped."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    types = _field_types()
    values: dict[str, object] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line.rstrip()!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in types:
            known = ", ".join(sorted(types))
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r} (known keys: {known})")
        values[key] = _convert(key, raw, types[key])
    return values


def resolve_config(
    file_path: Path | str | None = None,
    overrides: dict[str, object] | None = None,
) -> TrainConfig:
    """Merge defaults, an optional config file and explicit overrides."""
    merged: dict[str, object] = {}
    if file_path is not None:
        merged.update(parse_config_file(file_path))
    if overrides:
        merged.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**merged)


def write_resolved(config: TrainConfig, run_dir: Path | str) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    out = run_dir / RESOLVED_NAME
    lines = [
        f"{f.name}={getattr(config, f.name)}"
        for f in dataclasses.fields(TrainConfig)
        if getattr(config, f.name) is not None
    ]
    out.write_text("\n".join(lines) + "\n")
    return out
