"""Flat ``key=value`` run configuration shared by the CLI subcommands."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .rnnlm_core import ModelConfig
from .trainer import TrainConfig

MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig) if f.name != "V")
TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))
PATH_KEYS = ("corpus", "vocab", "out", "table_dir")
ALL_KEYS = MODEL_KEYS + TRAIN_KEYS + PATH_KEYS

_MODEL_DEFAULTS = {f.name: f.default for f in dataclasses.fields(ModelConfig) if f.name != "V"}
_TRAIN_DEFAULTS = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
_FLOAT_KEYS = {"lr0", "decay_rate", "decay_steps", "beta1", "beta2", "eps", "clip_norm", "table_init"}


class ConfigError(ValueError):
    pass


def parse_kv_lines(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in ALL_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def parse_overrides(tokens: Iterable[str], source: str = "<grid>") -> dict[str, str]:
    return parse_kv_lines(tokens, source)


def _coerce(key: str, value):
    if not isinstance(value, str):
        return value
    if key in PATH_KEYS:
        return value
    if key == "decay_steps" and value.lower() in ("none", ""):
        return None
    if key == "include_current":
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if key == "injection":
        return value
    try:
        return float(value) if key in _FLOAT_KEYS else int(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None


@dataclass
class RunConfig:
    values: dict[str, object] = field(default_factory=dict)

    @classmethod
    def from_sources(cls, path=None, overrides: Mapping[str, object] | None = None) -> "RunConfig":
        raw: dict[str, object] = {}
        if path is not None:
            with open(path, encoding="utf-8") as f:
                raw.update(parse_kv_lines(f, str(path)))
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            if key not in ALL_KEYS:
                raise ConfigError(f"unknown key {key!r}")
            raw[key] = value
        return cls({k: _coerce(k, v) for k, v in raw.items()})

    def merged(self, overrides: Mapping[str, object]) -> "RunConfig":
        values = dict(self.values)
        values.update({k: _coerce(k, v) for k, v in overrides.items()})
        return RunConfig(values)

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def model_config(self, V: int) -> ModelConfig:
        kwargs = {k: self.values.get(k, _MODEL_DEFAULTS[k]) for k in MODEL_KEYS}
        try:
            return ModelConfig(V=V, **kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        kwargs = {k: self.values.get(k, _TRAIN_DEFAULTS[k]) for k in TRAIN_KEYS}
        try:
            return TrainConfig(**kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def echo(self) -> list[str]:
        """Every effective setting as ``key=value``, defaults included."""
        out = []
        for key in ALL_KEYS:
            if key in self.values:
                value = self.values[key]
            elif key in _MODEL_DEFAULTS:
                value = _MODEL_DEFAULTS[key]
            elif key in _TRAIN_DEFAULTS:
                value = _TRAIN_DEFAULTS[key]
            else:
                continue
            out.append(f"{key}={value}")
        return out
