"""Deterministic JSON and CSV emission.

Keys are sorted and floats are written with 17 significant digits, so equal
inputs give byte-identical files.
"""
from __future__ import annotations

import enum
import math

import numpy as np


def _num(x: float) -> str:
    if math.isnan(x):
        return '"NaN"'
    if math.isinf(x):
        return '"Infinity"' if x > 0 else '"-Infinity"'
    return "%.17g" % x


def _str(s: str) -> str:
    out = ['"']
    for ch in s:
        if ch == '"':
            out.append('\\"')
        elif ch == "\\":
            out.append("\\\\")
        elif ch == "\n":
            out.append("\\n")
        elif ch == "\t":
            out.append("\\t")
        elif ord(ch) < 0x20:
            out.append("\\u%04x" % ord(ch))
        else:
            out.append(ch)
    out.append('"')
    return "".join(out)


def _encode(o, depth, parts):
    pad = "  " * (depth + 1)
    end = "  " * depth
    if o is None:
        parts.append("null")
    elif isinstance(o, (bool, np.bool_)):
        parts.append("true" if o else "false")
    elif isinstance(o, enum.Enum):
        _encode(o.value if isinstance(o.value, str) else o.name, depth, parts)
    elif isinstance(o, (int, np.integer)):
        parts.append(str(int(o)))
    elif isinstance(o, (float, np.floating)):
        parts.append(_num(float(o)))
    elif isinstance(o, str):
        parts.append(_str(o))
    elif isinstance(o, dict):
        if not o:
            parts.append("{}")
            return
        parts.append("{\n")
        items = sorted(o.items(), key=lambda kv: str(kv[0]))
        for i, (k, v) in enumerate(items):
            parts.append(pad + _str(str(k)) + ": ")
            _encode(v, depth + 1, parts)
            parts.append(",\n" if i + 1 < len(items) else "\n")
        parts.append(end + "}")
    elif isinstance(o, (list, tuple, np.ndarray)):
        seq = o.tolist() if isinstance(o, np.ndarray) else o
        if not len(seq):
            parts.append("[]")
            return
        parts.append("[\n")
        for i, v in enumerate(seq):
            parts.append(pad)
            _encode(v, depth + 1, parts)
            parts.append(",\n" if i + 1 < len(seq) else "\n")
        parts.append(end + "]")
    else:
        raise TypeError(f"cannot serialise {type(o).__name__}")


def dumps(obj) -> str:
    parts: list[str] = []
    _encode(obj, 0, parts)
    return "".join(parts) + "\n"


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(obj))


def csv_text(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join("%.17g" % float(v) if isinstance(v, (float, np.floating)) else str(v)
                              for v in row))
    return "\n".join(lines) + "\n"
