"""Flat ``key = value`` text with canonical (sorted) ordering.

Used for experiment configs and for checkpoint headers; emitting and
re-parsing is exact because floats are written with ``repr``.
"""

from __future__ import annotations

import dataclasses
import typing


class ConfigError(ValueError):
    pass


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    text = str(value)
    if "\n" in text or text != text.strip():
        raise ConfigError(f"value {text!r} cannot be written on one line")
    return text


def coerce(text: str, kind, key: str = "?"):
    try:
        if kind is bool:
            if text not in ("true", "false"):
                raise ValueError(text)
            return text == "true"
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind.__name__}") from None


def emit(items: dict[str, object]) -> str:
    return "".join(f"{k} = {format_value(items[k])}\n" for k in sorted(items))


def parse(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def dataclass_items(obj, prefix: str = "") -> dict[str, object]:
    return {f"{prefix}{f.name}": getattr(obj, f.name) for f in dataclasses.fields(obj)}


def dataclass_from_items(cls, items: dict[str, str], prefix: str = "", strict: bool = True):
    """Build ``cls`` from the ``prefix``-ed keys of ``items``; missing keys keep defaults."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, text in items.items():
        if not key.startswith(prefix):
            continue
        name = key[len(prefix):]
        if name not in names:
            if strict:
                raise ConfigError(f"unknown key {key!r}")
            continue
        kwargs[name] = coerce(text, hints[name], key)
    return cls(**kwargs)
