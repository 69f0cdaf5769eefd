"""Flat ``key = value`` configuration files.

One entry per line, ``#`` starts a comment. Keys are the field names of
ModelConfig, LossConfig, DegradeConfig and TrainConfig; ``seed`` is shared by
the degradation and training sections. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import DegradeConfig
from .losses import LossConfig
from .network import ModelConfig
from .training import TrainConfig

_SECTIONS = {
    "model": ModelConfig,
    "loss": LossConfig,
    "degrade": DegradeConfig,
    "train": TrainConfig,
}
_NESTED = {"loss", "degrade"}


class ConfigFileError(ValueError):
    pass


def _schema() -> dict[str, list[tuple[str, str]]]:
    schema: dict[str, list[tuple[str, str]]] = {}
    for section, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            if section == "train" and f.name in _NESTED:
                continue
            schema.setdefault(f.name, []).append((section, str(f.type)))
    return schema


SCHEMA = _schema()


def _coerce(key: str, kind: str, raw: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError as exc:
        raise ConfigFileError(f"{key}: cannot parse {raw!r} as {kind}") from exc


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    entries = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigFileError(f"{source}:{lineno}: expected 'key = value'")
        entries[key.strip()] = value.strip()
    return entries


@dataclass
class CliConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    degrade: DegradeConfig = field(default_factory=DegradeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_entries(cls, entries: dict[str, str]) -> CliConfig:
        values: dict[str, dict] = {s: {} for s in _SECTIONS}
        for key, raw in entries.items():
            if key not in SCHEMA:
                raise ConfigFileError(f"unknown configuration key {key!r}")
            for section, kind in SCHEMA[key]:
                values[section][key] = _coerce(key, kind, raw)
        try:
            loss = LossConfig(**values["loss"])
            degrade = DegradeConfig(**values["degrade"])
            return cls(
                model=ModelConfig(**values["model"]),
                loss=loss,
                degrade=degrade,
                train=TrainConfig(loss=loss, degrade=degrade, **values["train"]),
            )
        except ValueError as exc:
            raise ConfigFileError(str(exc)) from exc


def load_config(path=None, overrides: dict[str, str] | None = None) -> CliConfig:
    """Read ``path`` (optional) and apply ``overrides``; overrides win."""
    entries = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigFileError(f"cannot read config {path}: {exc}") from exc
        entries.update(parse_lines(text, str(path)))
    entries.update(overrides or {})
    return CliConfig.from_entries(entries)


def dump_config(cfg: CliConfig) -> str:
    lines = []
    for section, obj in (("model", cfg.model), ("loss", cfg.loss), ("degrade", cfg.degrade), ("train", cfg.train)):
        lines.append(f"# {section}")
        for f in dataclasses.fields(obj):
            if section == "train" and f.name in _NESTED:
                continue
            if section == "train" and f.name == "seed":
                continue  # written with the degradation section
            lines.append(f"{f.name} = {getattr(obj, f.name)}")
    return "\n".join(lines) + "\n"
