"""INI-style run configuration.

Each section maps onto one config dataclass; keys are coerced by the field's
annotated type. Absent sections or keys fall back to dataclass defaults, so a
minimal file (or none at all) is always valid.

    [bc]
    episodes = 120
    steps = 4000

    [engine]
    mode = routed
    keep_ratio = 0.4
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path
from typing import Any

from .action_head import HeadConfig
from .backbone import BackboneConfig
from .cache import CacheConfig
from .engine import EngineConfig
from .envsim import EnvConfig
from .numerics import ConfigError, InputError
from .router import RouterConfig
from .training import BCConfig, DistillConfig

SECTION_TYPES: dict[str, type] = {
    "backbone": BackboneConfig,
    "router": RouterConfig,
    "head": HeadConfig,
    "cache": CacheConfig,
    "env": EnvConfig,
    "engine": EngineConfig,
    "bc": BCConfig,
    "distill": DistillConfig,
}


@dataclasses.dataclass
class RunConfig:
    backbone: BackboneConfig
    router: RouterConfig
    head: HeadConfig
    cache: CacheConfig
    env: EnvConfig
    engine: EngineConfig
    bc: BCConfig
    distill: DistillConfig


def _coerce(raw: str, annotation: Any, key: str) -> Any:
    text = raw.strip()
    if annotation in (int, "int"):
        return int(text)
    if annotation in (float, "float"):
        return float(text)
    if annotation in (bool, "bool"):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: cannot parse boolean from {raw!r}")
    if annotation in (str, "str"):
        return text
    if "tuple" in str(annotation):
        return tuple(float(part) for part in text.replace(",", " ").split())
    if "int | None" in str(annotation) or "Optional[int]" in str(annotation):
        return None if text.lower() in ("none", "") else int(text)
    raise ConfigError(f"{key}: unsupported config field type {annotation!r}")


def _build_section(cls: type, section: configparser.SectionProxy | None):
    if section is None:
        return cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in section.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} for section [{cls.__name__}]")
        kwargs[key] = _coerce(raw, fields[key].type, key)
    return cls(**kwargs)


def load_config(path: str | Path | None = None) -> RunConfig:
    parser = configparser.ConfigParser()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise InputError(f"config file not found: {path}")
        parser.read(path)
        for name in parser.sections():
            if name not in SECTION_TYPES:
                raise ConfigError(f"unknown config section [{name}]")
    built = {
        name: _build_section(cls, parser[name] if parser.has_section(name) else None)
        for name, cls in SECTION_TYPES.items()
    }
    return RunConfig(**built)
