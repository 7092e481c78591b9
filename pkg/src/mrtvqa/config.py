"""Sectioned key=value config files -> TrainConfig.

Format: INI-style sections [model], [train], [data]; values are coerced by
the target dataclass field's type. Unknown keys are errors, not warnings.
"""

from __future__ import annotations

import configparser
import dataclasses

from .model import ConfigError, ModelConfig
from .training import TrainConfig


def _coerce(raw, field_type):
    raw = raw.strip()
    if field_type in ("bool", bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected boolean, got {raw!r}")
    if raw.lower() == "none":
        return None
    if field_type in (int, "int"):
        return int(raw)
    if field_type in (float, "float"):
        return float(raw)
    if field_type in (tuple, "tuple"):
        parts = [x.strip() for x in raw.split(",")]
        return tuple(float(x) if "." in x else int(x) for x in parts)
    return raw


_FIELD_TYPES_MODEL = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
_FIELD_TYPES_TRAIN = {
    f.name: f.type for f in dataclasses.fields(TrainConfig) if f.name != "model"
}

_TYPE_NORMALIZE = {
    "bool": bool,
    "int": int,
    "float": float,
    "tuple": tuple,
    "str": str,
    "int | None": int,
    "str | None": str,
}


def _apply_section(section, fields, target_kwargs, section_name):
    for key, raw in section.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in [{section_name}]")
        ftype = _TYPE_NORMALIZE.get(str(fields[key]), fields[key])
        target_kwargs[key] = _coerce(raw, ftype)


def load_train_config(path, overrides=None):
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    model_kwargs, train_kwargs = {}, {}
    for section in parser.sections():
        if section == "model":
            _apply_section(parser[section], _FIELD_TYPES_MODEL, model_kwargs, section)
        elif section == "train":
            _apply_section(parser[section], _FIELD_TYPES_TRAIN, train_kwargs, section)
        elif section == "data":
            for key, raw in parser[section].items():
                if key not in ("data_dir", "out_dir"):
                    raise ConfigError(f"unknown key {key!r} in [data]")
                train_kwargs[key] = raw.strip()
        else:
            raise ConfigError(f"unknown config section [{section}]")
    if overrides:
        train_kwargs.update(overrides)
    cfg = TrainConfig(model=ModelConfig(**model_kwargs), **train_kwargs)
    return cfg.validate()
