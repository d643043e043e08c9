"""Flat ``key = value`` run configuration shared by every command.

Keys are namespaced: ``train.*`` fills TrainConfig, ``model.*`` fills
ModelConfig (``model.preset = micro`` starts from the small preset) and
``data.column.<field>`` renames CSV columns. Blank lines and ``#`` comments
are ignored.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import FIELDS
from .errors import ConfigError
from .nn.model import ModelConfig
from .train import TrainConfig

_PRESETS = {"default": ModelConfig, "micro": ModelConfig.micro}


def _convert(kind: str, key: str, text: str):
    try:
        if kind == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {text!r}") from None


def _field_types(cls) -> dict[str, str]:
    return {f.name: f.type if isinstance(f.type, str) else f.type.__name__ for f in dataclasses.fields(cls)}


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    columns: dict[str, str] = field(default_factory=dict)
    preset: str = "default"

    def to_kv(self) -> dict[str, str]:
        kv = {f"train.{k}": str(v) for k, v in dataclasses.asdict(self.train).items()}
        kv["model.preset"] = self.preset
        kv.update(self.model.to_kv())
        kv.update({f"data.column.{k}": v for k, v in sorted(self.columns.items())})
        return kv

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_kv().items())


def parse_config(text: str) -> RunConfig:
    raw: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in raw:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        raw[key] = value

    train_types = _field_types(TrainConfig)
    model_types = _field_types(ModelConfig)
    train, model, columns = {}, {}, {}
    preset = raw.pop("model.preset", "default")
    if preset not in _PRESETS:
        raise ConfigError(f"model.preset: unknown preset {preset!r} (choose from {', '.join(_PRESETS)})")
    for key, value in raw.items():
        section, _, name = key.partition(".")
        if section == "train" and name in train_types:
            train[name] = _convert(train_types[name], key, value)
        elif section == "model" and name in model_types:
            model[name] = _convert(model_types[name], key, value)
        elif section == "data" and name.startswith("column.") and name[7:] in FIELDS:
            columns[name[7:]] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        return RunConfig(TrainConfig(**train), _PRESETS[preset](**model), columns, preset)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)
