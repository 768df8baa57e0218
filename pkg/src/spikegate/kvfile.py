"""Flat ``key=value`` text records used for configs and checkpoints.

Grammar, one record per line::

    line    := blank | comment | record
    comment := '#' any*
    record  := key '=' value
    key     := segment ('.' segment)*      segment := [A-Za-z0-9_-]+

Whitespace around keys and values is stripped. Duplicate keys are an error.
Floats are written with ``repr`` so they reload bit-exactly.
"""

from __future__ import annotations

import re
from typing import Dict, Mapping

from .errors import FormatError

_KEY = re.compile(r"^[A-Za-z0-9_\-]+(\.[A-Za-z0-9_\-]+)*$")


def parse_kv(text: str, source: str = "<string>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not _KEY.match(key):
            raise FormatError(f"{source}:{lineno}: invalid key {key!r}")
        if key in out:
            raise FormatError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def format_kv(records: Mapping[str, object], header: str = "") -> str:
    lines = [f"# {h}" for h in header.splitlines()] if header else []
    lines += [f"{k}={format_value(v)}" for k, v in records.items()]
    return "\n".join(lines) + "\n"
