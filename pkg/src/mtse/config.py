"""Human-readable ``key = value`` files mapped onto dataclasses.

Lines starting with ``#`` are comments. Sequences are written comma
separated. Unknown keys are rejected so that a typo never silently falls
back to a default.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .errors import ConfigurationError


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigurationError(f"line {n}: duplicate key {key!r}")
        out[key] = value
    return out


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(_format(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def dump_kv(mapping: dict) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in mapping.items())


def _convert(raw: str, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin is typing.Union:
            if raw.lower() == "none" and type(None) in args:
                return None
            inner = [a for a in args if a is not type(None)]
            return _convert(raw, inner[0], key)
        if origin in (tuple, list):
            elem = args[0] if args else str
            items = [s.strip() for s in raw.split(",") if s.strip()]
            vals = [_convert(s, elem, key) for s in items]
            return tuple(vals) if origin is tuple else vals
        if hint is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {hint}") from exc


def from_kv(cls, mapping: dict[str, str], **overrides):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - names
    if unknown:
        raise ConfigurationError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {k: _convert(v, hints[k], k) for k, v in mapping.items()}
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**kwargs)


def load_config(cls, path, **overrides):
    return from_kv(cls, parse_kv(Path(path).read_text()), **overrides)


def save_config(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_kv(dataclasses.asdict(obj)))
    return path
