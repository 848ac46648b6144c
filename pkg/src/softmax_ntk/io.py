"""Byte-stable persistence: CSV traces, JSON reports and run manifests.

Floats are written with ``repr`` (shortest string that round-trips a
64-bit float), missing values as empty cells, and JSON with sorted keys,
so identical runs give identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
import os
from pathlib import Path

import numpy as np


def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def csv_text(header, rows, preamble=()) -> str:
    buf = _io.StringIO()
    for line in preamble:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row has {len(row)} cells, header has {len(header)}")
        writer.writerow([format_cell(v) for v in row])
    return buf.getvalue()


def read_csv(path):
    """Returns ``(preamble, header, rows)``; cells are floats, or None when empty."""
    preamble, body = [], []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("# ") and not body:
                preamble.append(line[2:].rstrip("\n"))
            else:
                body.append(line)
    reader = csv.reader(body)
    header = next(reader)
    rows = [[None if c == "" else _parse(c) for c in row] for row in reader]
    return preamble, header, rows


def _parse(cell):
    try:
        return int(cell)
    except ValueError:
        pass
    try:
        return float(cell)
    except ValueError:
        return cell


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        # JSON has no inf/nan; strings keep the document standard
        return f if math.isfinite(f) else repr(f)
    return obj


def json_text(obj) -> str:
    return json.dumps(_to_jsonable(obj), indent=2, sort_keys=True) + "\n"


def git_blob_sha1(data: bytes) -> str:
    """Content hash identical to ``git hash-object``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


class RunOutput:
    """Stages every file as ``<name>.partial`` and renames on :meth:`commit`.

    An aborted run leaves only ``.partial`` files behind.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.names: list[str] = []

    def _write(self, name, data: bytes):
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / f"{name}.partial").write_bytes(data)
        if name not in self.names:
            self.names.append(name)

    def write_text(self, name, text: str):
        self._write(name, text.encode("utf-8"))

    def write_csv(self, name, header, rows, preamble=()):
        self.write_text(name, csv_text(header, rows, preamble))

    def write_json(self, name, obj):
        self.write_text(name, json_text(obj))

    def hashes(self) -> dict:
        return {name: git_blob_sha1((self.root / f"{name}.partial").read_bytes())
                for name in self.names}

    def commit(self):
        for name in self.names:
            os.replace(self.root / f"{name}.partial", self.root / name)
