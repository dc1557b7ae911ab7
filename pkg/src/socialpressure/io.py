"""Plain CSV writers/readers shared by every module.

Floats are written with 17 significant digits so a file round-trips to the
exact same doubles.  Every file may start with ``#`` comment lines (config
hash, seed); readers skip them.
"""
from __future__ import annotations

import hashlib
import json
import os
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

__all__ = ["fmt", "write_csv", "read_csv", "config_hash"]


def fmt(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf8")).hexdigest()[:16]


def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence], comments: Optional[Sequence[str]] = None) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        for line in comments or ():
            fh.write(f"# {line}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def read_csv(path):
    """Return ``(columns, data)`` with ``data`` a float array of shape (rows, cols)."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    columns = lines[0].split(",")
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]], dtype=float)
    return columns, data.reshape(len(lines) - 1, len(columns))
