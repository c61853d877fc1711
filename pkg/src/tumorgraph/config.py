"""Declarative pipeline configuration loaded from YAML with exact-key validation."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import UsageError
from .gnn import GnnConfig
from .metrics import DEFAULT_HD95_PENALTY
from .phantom import PhantomSpec
from .refine import CnnConfig


@dataclass
class SlicConfig:
    k: int = 15000
    m: float = 0.5
    max_iter: int = 10
    seed: int = 0


@dataclass
class MetricsConfig:
    hd95_penalty: float = DEFAULT_HD95_PENALTY


@dataclass
class PipelineConfig:
    jobs: int = 1
    slic: SlicConfig = field(default_factory=SlicConfig)
    gnn: GnnConfig = field(default_factory=GnnConfig)
    cnn: CnnConfig = field(default_factory=CnnConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise UsageError(f"{where or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise UsageError(f"unknown config key(s) at {where or 'top level'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name) if name in fields else None
        if dataclasses.is_dataclass(default) and value is not None:
            kwargs[name] = _build(type(default), value, f"{where}.{name}".lstrip("."))
        elif isinstance(value, list):
            kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config at {where or 'top level'}: {exc}") from exc


def config_from_dict(data: dict | None) -> PipelineConfig:
    return _build(PipelineConfig, data or {}, "")


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise UsageError(f"{path}: not valid YAML ({exc})") from exc
    return config_from_dict(data)


def _plain(obj: Any):
    if isinstance(obj, tuple):
        return [_plain(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def config_to_dict(cfg: PipelineConfig) -> dict:
    return _plain(dataclasses.asdict(cfg))


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)


def apply_overrides(cfg: PipelineConfig, overrides: list[str]) -> PipelineConfig:
    """Apply ``section.key=value`` overrides; values are parsed as YAML scalars."""
    data = config_to_dict(cfg)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"override {item!r} is not of the form key=value")
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise UsageError(f"unknown config section in override {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise UsageError(f"unknown config key in override {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return config_from_dict(data)
