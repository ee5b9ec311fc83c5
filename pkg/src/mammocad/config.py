"""Flat ``key = value`` config files mapped onto dataclasses."""

from __future__ import annotations

import configparser
import dataclasses
import typing
from pathlib import Path
from typing import Any, Optional


class ConfigError(ValueError):
    pass


def parse_flat(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#``/``;`` start comments."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"), strict=True)
    parser.optionxform = str
    try:
        parser.read_string("[_]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    if len(parser.sections()) != 1:
        raise ConfigError("section headers are not supported; use prefixed keys such as cade.epochs")
    return {k.strip(): v.strip() for k, v in parser.items("_")}


def read_flat(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_flat(path.read_text(encoding="utf-8"))


def _coerce(raw: str, tp, key: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        if raw.lower() in ("", "none", "null"):
            return None
        return _coerce(raw, inner[0], key)
    if origin is tuple:
        parts = [p.strip() for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(p, args[0], key) for p in parts)
        if len(parts) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} comma-separated values, got {raw!r}")
        return tuple(_coerce(p, a, key) for p, a in zip(parts, args))
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw, 0)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {tp.__name__}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def field_types(cls) -> dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def build(cls, values: dict[str, str], prefix: str = "", base: Optional[dict] = None, strict: bool = True):
    """Instantiate ``cls`` from string values, optionally under ``prefix.``."""
    types = field_types(cls)
    kwargs = dict(base or {})
    for key, raw in values.items():
        name = key[len(prefix) + 1:] if prefix and key.startswith(prefix + ".") else (None if prefix else key)
        if name is None:
            continue
        if name not in types:
            if strict:
                raise ConfigError(f"unknown key {key!r}")
            continue
        kwargs[name] = _coerce(raw, types[name], key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def to_flat(obj, prefix: str = "") -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}.{f.name}" if prefix else f.name
        if isinstance(v, tuple):
            out[key] = ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, float):
            out[key] = repr(v)
        elif v is None:
            out[key] = "none"
        else:
            out[key] = str(v)
    return out


def format_flat(values: dict[str, str]) -> str:
    return "".join(f"{k} = {values[k]}\n" for k in sorted(values))
