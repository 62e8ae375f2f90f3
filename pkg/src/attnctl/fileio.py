"""Small file-writing helpers shared by the run harness.

Everything written to disk goes through ``atomic_write_text`` (temp file in the
target directory, then ``os.replace``) so partially written artifacts never
appear under the final name. Floats are serialized with ``repr`` of the Python
float, which round-trips exactly and is stable across runs.
"""
from __future__ import annotations

import json
import os
import tempfile
from typing import Any, Iterable, Sequence


def fnum(x: float) -> str:
    """Shortest exact decimal form of a float (round-trips via float())."""
    return repr(float(x))


def atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    """Write a CSV with a fixed column order and repr-formatted floats."""
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for cell in row:
            if isinstance(cell, float):
                cells.append(fnum(cell))
            else:
                cells.append(str(cell))
        lines.append(",".join(cells))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_json(path: str, payload: dict) -> None:
    """Write JSON with sorted keys; byte-identical for equal payloads."""
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
