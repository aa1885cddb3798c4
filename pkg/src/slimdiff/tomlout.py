"""Minimal TOML emitter.

Covers the subset this package writes: string/int/float/bool scalars,
flat lists, and nested tables. Output parses back with any compliant
reader; values outside the subset raise instead of serializing wrong.
"""

import math
import re

from .errors import FormatError

_BARE_KEY = re.compile(r"^[A-Za-z0-9_-]+$")

_ESCAPES = {"\\": "\\\\", '"': '\\"', "\n": "\\n", "\r": "\\r", "\t": "\\t", "\b": "\\b", "\f": "\\f"}


def _key(k) -> str:
    if not isinstance(k, str) or not k:
        raise FormatError(f"table keys must be non-empty strings, got {k!r}")
    return k if _BARE_KEY.match(k) else _string(k)


def _string(s: str) -> str:
    out = ['"']
    for ch in s:
        if ch in _ESCAPES:
            out.append(_ESCAPES[ch])
        elif ord(ch) < 0x20:
            out.append(f"\\u{ord(ch):04x}")
        else:
            out.append(ch)
    out.append('"')
    return "".join(out)


def _scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if not math.isfinite(v):
            raise FormatError(f"non-finite float {v!r} has no portable TOML form here")
        text = repr(v)
        return text if ("." in text or "e" in text or "E" in text) else text + ".0"
    if isinstance(v, str):
        return _string(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_scalar(x) for x in v) + "]"
    raise FormatError(f"cannot serialize {type(v).__name__} to TOML")


def dumps(data: dict) -> str:
    """Serialize a nested dict. Scalars precede sub-tables at every level."""
    if not isinstance(data, dict):
        raise FormatError("top-level TOML value must be a table")
    lines: list[str] = []

    def emit(table: dict, path: tuple[str, ...]):
        scalars = [(k, v) for k, v in table.items() if not isinstance(v, dict)]
        subtables = [(k, v) for k, v in table.items() if isinstance(v, dict)]
        if path and (scalars or not subtables):
            lines.append("[" + ".".join(_key(p) for p in path) + "]")
        for k, v in scalars:
            lines.append(f"{_key(k)} = {_scalar(v)}")
        for k, v in subtables:
            if lines and lines[-1] != "":
                lines.append("")
            emit(v, path + (k,))

    emit(data, ())
    return "\n".join(lines) + "\n"
