"""Plain CSV import/export shared by every module.

All files are UTF-8 with LF line endings, a single header line and
floats written with ``repr`` so they round-trip bit-exactly.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_columns(path, header: Sequence[str], columns: Sequence[Iterable]) -> Path:
    """Write equal-length columns to ``path`` atomically."""
    path = Path(path)
    cols = [list(c) for c in columns]
    n = {len(c) for c in cols}
    if len(n) > 1:
        raise ValueError(f"column lengths differ: {sorted(n)}")
    lines = [",".join(header)]
    for row in zip(*cols):
        lines.append(",".join(_fmt(v) for v in row))
    write_text_atomic(path, "\n".join(lines) + "\n")
    return path


def read_columns(path, header: Sequence[str]) -> list[np.ndarray]:
    """Read a CSV written by :func:`write_columns`; the header must match."""
    with open(path, encoding="utf-8", newline="") as fh:
        first = fh.readline().strip()
        got = [h.strip() for h in first.split(",")]
        if got != list(header):
            raise ValueError(f"{path}: expected header {','.join(header)!r}, got {first!r}")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    if not rows:
        return [np.array([], dtype=float) for _ in header]
    if any(len(r) != len(header) for r in rows):
        raise ValueError(f"{path}: ragged rows")
    data = np.array(rows, dtype=float)
    return [data[:, i].copy() for i in range(len(header))]


def write_text_atomic(path, text: str) -> None:
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
