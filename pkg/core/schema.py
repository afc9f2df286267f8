"""Nested dataclass ⇄ JSON conversion with strict key checking."""

import json
from dataclasses import asdict, fields, is_dataclass, replace
from typing import Any, Dict, Mapping, Tuple, Union, get_args, get_origin, get_type_hints

from .exceptions import ConfigurationError


def from_dict(cls, data: Any, path: str = ''):
    """Build dataclass `cls` from a mapping, rejecting unknown keys at every level"""
    if isinstance(data, cls):
        return data
    where = path or cls.__name__
    if not isinstance(data, Mapping):
        raise ConfigurationError(f"{where} must be an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown keys {unknown} in {where}")
    hints = get_type_hints(cls)
    kwargs = {name: _coerce(hints[name], value, f"{path}.{name}" if path else name)
              for name, value in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigurationError(f"{where}: {e}")


def _coerce(tp, value, path: str):
    origin, args = get_origin(tp), get_args(tp)
    if origin is Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if is_dataclass(tp):
        return from_dict(tp, value, path)
    if origin in (tuple, Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{path} must be a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if args and len(args) != len(value):
            raise ConfigurationError(f"{path} needs {len(args)} entries, got {len(value)}")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value))) if args else tuple(value)
    if origin in (dict, Dict):
        if not isinstance(value, Mapping):
            raise ConfigurationError(f"{path} must be an object, got {value!r}")
        return dict(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path} must be true or false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path} must be an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path} must be a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{path} must be a string, got {value!r}")
        return value
    return value


def to_dict(obj) -> Dict[str, Any]:
    """Every field materialised, tuples as lists"""
    return json.loads(json.dumps(asdict(obj)))


def canonical_json(obj) -> str:
    data = to_dict(obj) if is_dataclass(obj) else obj
    return json.dumps(data, sort_keys=True, separators=(',', ':'))


def set_path(obj, dotted: str, value):
    """Copy of a nested frozen dataclass with one dotted field replaced"""
    head, _, rest = dotted.partition('.')
    if not is_dataclass(obj) or head not in {f.name for f in fields(obj)}:
        raise ConfigurationError(f"unknown config key {dotted!r}")
    if rest:
        child = getattr(obj, head)
        if child is None:
            hint = get_type_hints(type(obj))[head]
            child = [a for a in get_args(hint) if a is not type(None)][0]()
        return replace(obj, **{head: set_path(child, rest, value)})
    hint = get_type_hints(type(obj))[head]
    return replace(obj, **{head: _coerce(hint, value, dotted)})
