"""Reading and writing the ``key = value`` text configs.

All three config kinds (hardware, cost, search) share one parser; each kind
declares its keys and a converter per key so errors can cite the line.
"""

from __future__ import annotations

import dataclasses
import os
import tempfile
from pathlib import Path

from .errors import ConfigError


def parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_int_list(text):
    items = [s for s in text.replace(",", " ").split() if s]
    if not items:
        raise ValueError("empty list")
    return tuple(int(s) for s in items)


def read_key_values(path):
    """Return ``{key: (value_text, line_no)}``; comments start with ``#``."""
    out = {}
    text = Path(path).read_text(encoding="utf-8")
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", path, no)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"empty key or value in {raw.strip()!r}", path, no)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", path, no)
        out[key] = (value, no)
    return out


def load_dataclass(cls, path, converters, aliases=None):
    """Build ``cls`` from a key=value file, converting each value.

    ``converters`` maps file key -> callable; ``aliases`` maps file key ->
    dataclass field name when they differ.
    """
    aliases = aliases or {}
    kv = read_key_values(path)
    kwargs = {}
    for key, (value, no) in kv.items():
        if key not in converters:
            raise ConfigError(f"unknown key {key!r}", path, no)
        try:
            kwargs[aliases.get(key, key)] = converters[key](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", path, no) from None
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        if exc.path is None:
            raise ConfigError(str(exc), path) from None
        raise


def dump_dataclass(obj, aliases=None):
    """Inverse of :func:`load_dataclass` for simple scalar/tuple fields."""
    aliases = aliases or {}
    reverse = {v: k for k, v in aliases.items()}
    lines = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, (tuple, list)):
            text = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{reverse.get(f.name, f.name)} = {text}")
    return "\n".join(lines) + "\n"


def atomic_write_text(path, text):
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
