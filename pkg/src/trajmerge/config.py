"""YAML experiment configs.

A config file is one YAML mapping whose nested sections mirror
:class:`~trajmerge.loop.ExperimentConfig`. Unknown keys are rejected and every
default is materialized when the resolved config is dumped.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping

import yaml
from pydantic import ValidationError

from .errors import ConfigError
from .loop import ExperimentConfig


def _format_validation(exc: ValidationError, source: str) -> str:
    lines = [f"{source}: invalid config"]
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"  {loc}: {err['msg']}")
    return "\n".join(lines)


def config_from_dict(doc: Mapping[str, Any], source: str = "<config>") -> ExperimentConfig:
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{source}: top level must be a mapping")
    try:
        return ExperimentConfig.model_validate(dict(doc))
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc, source)) from exc


def load_config_dict(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: config file not found") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: YAML parse error: {exc}") from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def parse_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Load ``path`` and apply dotted-key ``overrides`` before validation."""
    doc = load_config_dict(path)
    for key, value in (overrides or {}).items():
        set_dotted(doc, key, value)
    return config_from_dict(doc, str(path))


def set_dotted(doc: dict, key: str, value: Any) -> None:
    *parents, leaf = key.split(".")
    node = doc
    for p in parents:
        child = node.get(p)
        if child is None:
            child = node[p] = {}
        elif not isinstance(child, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a section")
        node = child
    node[leaf] = value


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def write_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")
