"""Run configuration: nested dataclasses loaded from JSON with unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .generator import GeneratorConfig
from .harness import ExperimentGrid
from .vqvae import VqVaeConfig


class ConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_subjects: int = 15
    grasps_per_object: int = 5
    fps: int = 30


@dataclass
class Paths:
    dataset: str = "data/dataset.jsonl"
    checkpoints: str = "checkpoints"
    reports: str = "reports"


@dataclass
class RunConfig:
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    synth: SynthConfig = field(default_factory=SynthConfig)
    vqvae: VqVaeConfig = field(default_factory=VqVaeConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    grid: ExperimentGrid = field(default_factory=ExperimentGrid)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_scalar(value, tp, where: str):
    origin = typing.get_origin(tp)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        (inner,) = typing.get_args(tp)
        return [_check_scalar(v, inner, f"{where}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data: dict, where: str = ""):
    """Build dataclass ``cls`` from ``data``; unknown keys or wrong types raise :class:`ConfigError`."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(tp):
            kwargs[name] = from_dict(tp, value, path)
        else:
            kwargs[name] = _check_scalar(value, tp, path)
    return cls(**kwargs)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        cfg = from_dict(RunConfig, data)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    try:
        cfg.vqvae.validate()
        cfg.generator.validate()
        cfg.grid.validate(cfg.vqvae.downsample)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
