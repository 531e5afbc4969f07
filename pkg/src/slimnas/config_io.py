"""Config (de)serialisation shared by checkpoints, manifests, and the CLI.

Configs are plain dataclasses.  ``to_plain`` turns them into JSON-ready
dicts; ``from_plain`` rebuilds them and rejects unknown keys so a typo'd
config file fails fast instead of silently training the wrong thing.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from enum import Enum
from typing import Any, Type, TypeVar

T = TypeVar("T")


class ConfigError(ValueError):
    """A config file or dict does not match its schema."""


def to_plain(obj: Any) -> Any:
    """Recursively convert dataclasses/enums/tuples into JSON-ready values."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_plain(v) for k, v in obj.items()}
    return obj


def canonical_json(obj: Any) -> str:
    return json.dumps(to_plain(obj), sort_keys=True, separators=(",", ":"))


def digest(obj: Any) -> str:
    """Stable hex digest of a config (or any JSON-ready structure)."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def _convert(value: Any, annotation: Any, where: str) -> Any:
    origin = typing.get_origin(annotation)
    if annotation is Any or annotation is None:
        return value
    if origin is typing.Union:
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if value is None:
            return None
        return _convert(value, args[0], where)
    if dataclasses.is_dataclass(annotation):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object for {annotation.__name__}")
        return from_plain(annotation, value, where=where)
    if isinstance(annotation, type) and issubclass(annotation, Enum):
        try:
            return annotation(value)
        except ValueError as err:
            allowed = [m.value for m in annotation]
            raise ConfigError(f"{where}: {value!r} not one of {allowed}") from err
    if origin is tuple:
        args = typing.get_args(annotation)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(v, args[0], f"{where}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} entries, got {len(value)}")
        return tuple(_convert(v, a, f"{where}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if origin in (list,):
        (item_t,) = typing.get_args(annotation) or (Any,)
        return [_convert(v, item_t, f"{where}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        return dict(value)
    if annotation is float and isinstance(value, int):
        return float(value)
    if annotation in (int, float, str, bool) and not isinstance(value, annotation):
        raise ConfigError(f"{where}: expected {annotation.__name__}, got {type(value).__name__}")
    return value


def from_plain(cls: Type[T], data: dict, where: str = "") -> T:
    """Build a dataclass from a plain dict, rejecting unknown keys."""
    if not dataclasses.is_dataclass(cls):
        raise TypeError(f"{cls} is not a dataclass")
    if not isinstance(data, dict):
        raise ConfigError(f"{where or cls.__name__}: expected an object")
    where = where or cls.__name__
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; known keys are {sorted(fields)}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _convert(value, hints.get(name, Any), f"{where}.{name}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err
