"""``key = value`` config files mapped onto dataclasses."""
from __future__ import annotations

import dataclasses
import typing

from .exceptions import ConfigError


def parse_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _convert(raw: str, typ, key: str):
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if origin is tuple:
            (item,) = {a for a in typing.get_args(typ) if a is not Ellipsis}
            return tuple(_convert(p.strip(), item, key) for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"{key}: unsupported field type {typ}")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def build(cls, mapping: dict, strict: bool = True):
    """Instantiate dataclass ``cls`` from string values; unknown keys raise when ``strict``."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - names
    if strict and unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    kwargs = {k: _convert(v, hints[k], k) for k, v in mapping.items() if k in names}
    return cls(**kwargs)


def split(mapping: dict, *classes):
    """Distribute one flat mapping over several dataclasses, rejecting keys none of them own."""
    owned = [{f.name for f in dataclasses.fields(c)} for c in classes]
    unknown = set(mapping) - set().union(*owned)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return tuple(build(c, {k: v for k, v in mapping.items() if k in names})
                 for c, names in zip(classes, owned))


def dump_text(*objs) -> str:
    lines = []
    for obj in objs:
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def load_file(path, *classes):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return split(parse_text(text), *classes)
