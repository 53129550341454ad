"""Flat ``key = value`` text configs mapped onto dataclasses.

Blank lines and ``#`` comments are ignored.  Tuple fields are written as
comma-separated numbers.  Unknown keys are rejected, all at once.
"""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path


class ConfigError(ValueError):
    pass


def _coerce(kind, raw: str, key: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if typing.get_origin(kind) is tuple:
            inner = typing.get_args(kind)[0]
            return tuple(inner(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
    raise ConfigError(f"unsupported field type for {key!r}")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def parse_config(cls, text: str, **overrides):
    hints = typing.get_type_hints(cls)
    fields = {f.name for f in dataclasses.fields(cls) if f.init and not f.name.startswith("_")}
    values, unknown = {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            unknown.append(key)
            continue
        values[key] = _coerce(hints[key], raw, key)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    values.update(overrides)
    return cls(**values)


def load_config(cls, path, **overrides):
    return parse_config(cls, Path(path).read_text(), **overrides)


def dump_config(obj) -> str:
    lines = [f"{f.name} = {_format(getattr(obj, f.name))}"
             for f in dataclasses.fields(obj) if f.init and not f.name.startswith("_")]
    return "\n".join(lines) + "\n"


def save_config(obj, path) -> None:
    Path(path).write_text(dump_config(obj))
