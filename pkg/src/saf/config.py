"""Flat ``key=value`` run configuration.

One file configures both the network and the optimizer; keys are the field
names of :class:`~saf.model.ModelConfig` and :class:`~saf.training.TrainConfig`
(the two sets are disjoint). Unknown keys are errors, never ignored.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from saf.model import ModelConfig
from saf.training import TrainConfig


class ConfigError(ValueError):
    pass


_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _convert(key: str, default, text: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(f"expected true/false, got {text!r}")
            return low in _TRUE
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in text.split(",") if p.strip())
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from None
    return text


def _defaults(cls) -> dict:
    return {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}


MODEL_KEYS = _defaults(ModelConfig)
TRAIN_KEYS = _defaults(TrainConfig)
assert not MODEL_KEYS.keys() & TRAIN_KEYS.keys()


def _build(cls, defaults: dict, items: Mapping[str, str]):
    unknown = sorted(set(items) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} key(s): {', '.join(unknown)}")
    kwargs = {k: _convert(k, defaults[k], v) for k, v in items.items()}
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def model_config_from_items(items: Mapping[str, str]) -> ModelConfig:
    return _build(ModelConfig, MODEL_KEYS, items)


def _format(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_items(cls, items: Mapping[str, str]) -> "RunConfig":
        unknown = sorted(set(items) - MODEL_KEYS.keys() - TRAIN_KEYS.keys())
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        model = model_config_from_items({k: v for k, v in items.items() if k in MODEL_KEYS})
        train = _build(TrainConfig, TRAIN_KEYS, {k: v for k, v in items.items() if k in TRAIN_KEYS})
        return cls(model, train)

    def items(self) -> list[tuple[str, str]]:
        out = []
        for part in (self.model, self.train):
            out += [(f.name, _format(getattr(part, f.name))) for f in dataclasses.fields(part)]
        return out

    def render(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.items())


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment; repeated keys are errors."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def load(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Read ``path`` (defaults only if None) and apply ``key=value`` overrides."""
    items: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        items = parse_lines(path.read_text().splitlines(), str(path))
    for ov in overrides:
        key, sep, value = ov.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override must look like key=value, got {ov!r}")
        items[key.strip()] = value.strip()
    return RunConfig.from_items(items)
