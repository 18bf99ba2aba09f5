"""Columnar text files: one metadata line followed by a CSV table."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def _format(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_columns(path, meta: dict, columns: dict) -> Path:
    """Write ``columns`` (name -> sequence) below a ``# key=value ...`` line."""
    path = Path(path)
    names = list(columns)
    lengths = {len(columns[k]) for k in names}
    if len(lengths) > 1:
        raise ValueError("columns have different lengths")
    with path.open("w", newline="") as fh:
        fh.write("# " + " ".join(f"{k}={_format(v)}" for k, v in meta.items()) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for row in zip(*(columns[k] for k in names)):
            writer.writerow([_format(v) for v in row])
    return path


def read_columns(path) -> tuple[dict, dict]:
    """Inverse of :func:`write_columns`; numeric columns come back as float arrays."""
    path = Path(path)
    with path.open(newline="") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise ValueError(f"{path}: missing metadata line")
        meta = dict(item.split("=", 1) for item in first[1:].split())
        reader = csv.reader(fh)
        names = next(reader)
        rows = list(reader)
    columns = {}
    for k, name in enumerate(names):
        raw = [row[k] for row in rows]
        try:
            columns[name] = np.array([float(v) for v in raw])
        except ValueError:
            columns[name] = np.array(raw)
    return meta, columns
