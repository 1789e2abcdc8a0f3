"""Small file helpers shared by the persistence code and the CLI."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path


class ConfigError(ValueError):
    """A config/manifest/data file could not be parsed or validated."""


def read_kv(path):
    """Parse a flat ``key = value`` file.

    Blank lines and ``#`` comments are skipped. Returns ``{key: (value, lineno)}``
    so callers can point at the offending line when a value fails to convert.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: no such file")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = (value, lineno)
    return out


def atomic_write_bytes(path, data: bytes):
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


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def canonical_json(obj) -> str:
    # repr-based float output is the shortest exact round-trip, so re-runs are byte-stable
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def fmt_float(x) -> str:
    return format(float(x), ".17g")
