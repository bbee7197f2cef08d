"""Output writers with reproducible formatting.

Every float is written with 17 significant digits (``format(x, ".17g")``)
in both CSV and JSON, so repeated runs can be compared byte for byte.  Files
are written to a temporary name in the target directory and renamed.

Binary path dumps are little-endian: a 20-byte header ``<u4 d, <u8 n_steps,
<f8 dt`` followed, for each path in order, by the ``(n_steps + 1) × d``
states ``x(0), x(dt), …, x(n_steps·dt)`` as row-major float64.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

__all__ = ["dumps_json", "fmt", "read_path_dump", "write_csv", "write_json", "write_path_dump", "write_text"]

_HEADER = struct.Struct("<IQd")


def fmt(x: Any) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def _json_value(obj: Any, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return '"NaN"'
        if math.isinf(x):
            return '"Infinity"' if x > 0 else '"-Infinity"'
        return format(x, ".17g")
    if isinstance(obj, str):
        import json

        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{_json_value(str(k), indent, level + 1)}: {_json_value(v, indent, level + 1)}"
                 for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(_json_value(v, indent, level + 1) for v in obj) + "]"
        items = [pad + _json_value(v, indent, level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_json(obj: Any, indent: int = 2) -> str:
    return _json_value(obj, indent, 0) + "\n"


def _atomic_write(path: Path, data: bytes):
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


def write_text(path, text: str):
    _atomic_write(Path(path), text.encode())


def write_json(path, obj: Any):
    write_text(path, dumps_json(obj))


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]]):
    lines = [",".join(header)]
    lines.extend(",".join(fmt(v) for v in row) for row in rows)
    write_text(path, "\n".join(lines) + "\n")


def write_path_dump(path, paths: np.ndarray, n_history: int, dt: float):
    """Dump ``paths[:, n_history:]`` (the states on ``[0, T]``) in the binary layout."""
    X = np.ascontiguousarray(paths[:, n_history:], dtype="<f8")
    d = X.shape[2]
    n_steps = X.shape[1] - 1
    _atomic_write(Path(path), _HEADER.pack(d, n_steps, float(dt)) + X.tobytes())


def read_path_dump(path) -> tuple[np.ndarray, float]:
    """Inverse of :func:`write_path_dump`; returns ``(paths, dt)``."""
    raw = Path(path).read_bytes()
    d, n_steps, dt = _HEADER.unpack_from(raw)
    X = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    return X.reshape(-1, n_steps + 1, d), dt
