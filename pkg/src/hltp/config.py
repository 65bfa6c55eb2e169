"""Run configuration: TOML sections with ``--section.key=value`` overrides.

Only keys present in :data:`DEFAULTS` are accepted; values are coerced to the
default's type.
"""

from __future__ import annotations

import copy
import sys
from dataclasses import fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .losses import LossConfig
from .student import StudentConfig
from .teacher import TeacherConfig
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, key, msg):
        super().__init__(f"{key}: {msg}")
        self.key = key


def _scalars(cls) -> dict:
    out = {}
    inst = cls()
    for f in fields(cls):
        v = getattr(inst, f.name)
        if isinstance(v, (bool, int, float, str)):
            out[f.name] = v
    return out


DEFAULTS = {
    "data": {
        "scenes": "",  # scene-cache directory; empty means generate synthetic scenes
        "test_scenes": "",
        "synthetic_train": 256,
        "synthetic_test": 64,
        "seed": 0,
        "noise": 0.0,
    },
    "train": _scalars(TrainConfig),
    "loss": _scalars(LossConfig),
    "teacher": _scalars(TeacherConfig),
    "student": _scalars(StudentConfig),
    "kdm": {"learnable": True},
    "eval": {"point": "best"},
    "plot": {"nx": 300, "ny": 300, "margin_sigma": 3.0},
}


def _coerce(key, default, value):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(key, f"expected a boolean, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        try:
            return int(value)
        except ValueError:
            raise ConfigError(key, f"expected an integer, got {value!r}") from None
    if isinstance(default, float):
        if isinstance(value, bool):
            raise ConfigError(key, f"expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(key, f"expected a number, got {value!r}") from None
    return str(value)


def set_key(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    if len(parts) != 2:
        raise ConfigError(dotted, "keys take the form section.key")
    section, key = parts
    if section not in DEFAULTS:
        raise ConfigError(dotted, f"unknown section (valid: {', '.join(DEFAULTS)})")
    if key not in DEFAULTS[section]:
        raise ConfigError(dotted, "unknown key")
    cfg[section][key] = _coerce(dotted, DEFAULTS[section][key], value)


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the TOML file, then ``section.key=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        with Path(path).open("rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(str(path), f"not valid TOML ({e})") from None
        for section, table in raw.items():
            if not isinstance(table, dict):
                raise ConfigError(section, "top-level entries must be tables")
            for key, value in table.items():
                set_key(cfg, f"{section}.{key}", value)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "override needs the form section.key=value")
        set_key(cfg, key, _parse_literal(value))
    return cfg


def _parse_literal(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def build(cfg: dict):
    """(TrainConfig, LossConfig, TeacherConfig, StudentConfig) from a config dict."""
    train = TrainConfig(**cfg["train"])
    loss = LossConfig(**cfg["loss"])
    teacher = TeacherConfig(**cfg["teacher"])
    s = dict(cfg["student"])
    variant = s.pop("variant", "full")
    student = StudentConfig.small(**s) if variant == "s" else StudentConfig(**s)
    return train, loss, teacher, student
