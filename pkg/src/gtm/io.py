"""File helpers: atomic writes and a forgiving numeric CSV reader."""

from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import DataError


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to a temp file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_csv_matrix(path, drop_cols=()) -> tuple[np.ndarray, list[str] | None]:
    """Read a comma-separated numeric table; a non-numeric first row is a header.

    ``drop_cols`` holds column names or 0-based indices to remove before parsing.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(cell.strip() for cell in r)]
    if not rows:
        raise DataError(f"{path}: no data rows")
    header = None
    if not all(_is_number(c) for c in rows[0]):
        header = [c.strip() for c in rows[0]]
        rows = rows[1:]
    width = len(header) if header is not None else len(rows[0])
    drop = set()
    for d in drop_cols:
        if isinstance(d, int) or (isinstance(d, str) and d.lstrip("-").isdigit()):
            drop.add(int(d) % width)
        elif header is not None and d in header:
            drop.add(header.index(d))
        else:
            raise DataError(f"{path}: unknown column {d!r}")
    keep = [i for i in range(width) if i not in drop]
    out = np.empty((len(rows), len(keep)))
    for i, row in enumerate(rows):
        line = i + (2 if header is not None else 1)
        if len(row) != width:
            raise DataError(f"{path}: row {line} has {len(row)} fields, expected {width}")
        for k, j in enumerate(keep):
            try:
                out[i, k] = float(row[j])
            except ValueError:
                raise DataError(f"{path}: non-numeric value {row[j]!r} at row {line}, column {j + 1}") from None
    if header is not None:
        header = [header[i] for i in keep]
    return out, header


def matrix_to_csv(data: np.ndarray, header=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header is not None:
        w.writerow(header)
    for row in np.atleast_2d(data) if len(data) else []:
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()
