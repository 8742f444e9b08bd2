"""Canonical key-value text blocks.

One ``key=value`` pair per line, keys sorted lexicographically, UTF-8, a
single trailing newline, ``#`` starts a comment line. The same canonical
form is used for corruption spec files, ensemble manifests, run configs,
run manifests, and checkpoint headers, so any of them can be hashed or
diffed byte-for-byte.
"""

from __future__ import annotations

import hashlib

from .errors import ConfigError


def dumps(entries: dict[str, str]) -> str:
    lines = []
    for key in sorted(entries):
        value = entries[key]
        if "\n" in key or "\n" in value:
            raise ConfigError(f"key-value entry {key!r} contains a newline")
        if "=" in key:
            raise ConfigError(f"key {key!r} contains '='")
        lines.append(f"{key}={value}")
    return "\n".join(lines) + ("\n" if lines else "")


def loads(text: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in entries:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        entries[key] = value.strip()
    return entries


def load_file(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return loads(fh.read())


def dump_file(path, entries: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(entries))


def digest(entries: dict[str, str]) -> str:
    """Hex digest of the canonical form; stable across platforms."""
    return hashlib.sha256(dumps(entries).encode("utf-8")).hexdigest()
