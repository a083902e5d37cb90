"""Run manifests, CSV tables and model persistence for the command-line tools."""

from __future__ import annotations

import csv
import json
import math
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _accel
from .errors import DataFormatError

MANIFEST_NAME = "manifest.json"


def package_versions() -> dict:
    import numba
    import scipy

    from . import __version__

    return {
        "anchor_uq": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "python": platform.python_version(),
    }


@dataclass
class RunManifest:
    """What ran, with which settings, and where its outputs went.

    The manifest is written before any result file.  Everything except
    ``started_at`` is a pure function of the command line and config.
    """

    command: str
    config: dict
    seeds: list
    outputs: list = field(default_factory=list)
    argv: list = field(default_factory=list)
    versions: dict = field(default_factory=package_versions)
    backend: str = field(default_factory=_accel.backend)
    started_at: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S%z"))

    def to_json(self) -> dict:
        return {
            "command": self.command,
            "argv": list(self.argv),
            "config": self.config,
            "seeds": list(self.seeds),
            "outputs": list(self.outputs),
            "versions": self.versions,
            "backend": self.backend,
            "started_at": self.started_at,
        }

    def write(self, path):
        write_json(path, self.to_json())

    @classmethod
    def read(cls, path):
        d = json.loads(Path(path).read_text())
        return cls(command=d["command"], config=d["config"], seeds=d["seeds"], outputs=d.get("outputs", []),
                   argv=d.get("argv", []), versions=d.get("versions", {}), backend=d.get("backend", ""),
                   started_at=d.get("started_at", ""))


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (tuple, set)):
        return list(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def fmt(value) -> str:
    """Shortest round-trip text for a float; ``NA`` for missing values."""
    if value is None:
        return "NA"
    value = float(value)
    if math.isnan(value):
        return "NA"
    return repr(value)


def read_table(path):
    """Numeric CSV with a header row; returns ``(header, array)``.

    Empty cells and ``NA`` become NaN.  Malformed rows raise
    ``DataFormatError`` naming the 1-based line number.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file", line=1) from None
        header = [h.strip() for h in header]
        if not header or any(h == "" for h in header):
            raise DataFormatError(f"{path}: header has empty column names", line=1)
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(c.strip() == "" for c in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}: expected {len(header)} fields, got {len(row)}", line=line)
            vals = []
            for cell in row:
                cell = cell.strip()
                if cell in ("", "NA", "nan", "NaN"):
                    vals.append(math.nan)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataFormatError(f"{path}: non-numeric value {cell!r}", line=line) from None
            rows.append(vals)
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    return header, data


def read_text_table(path):
    """CSV with a header row, kept as strings (for files mixing labels and numbers)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path}: empty file", line=1) from None
        rows = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}: expected {len(header)} fields, got {len(row)}",
                                      line=reader.line_num)
            rows.append([c.strip() for c in row])
    return header, rows


def write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([c if isinstance(c, str) else fmt(c) for c in row])


def read_dataset(path, n_targets: int = 1):
    """Split a numeric CSV into ``(inputs, targets, header)``; the last ``n_targets`` columns are targets."""
    header, data = read_table(path)
    if n_targets < 1 or n_targets >= len(header):
        raise DataFormatError(f"{path}: need at least one input column and {n_targets} target column(s)")
    if data.shape[0] == 0:
        raise DataFormatError(f"{path}: no data rows", line=2)
    if np.isnan(data).any():
        r = int(np.argwhere(np.isnan(data))[0, 0])
        raise DataFormatError(f"{path}: missing value", line=r + 2)
    return data[:, :-n_targets], data[:, -n_targets:], header


def echo(msg):
    print(msg, file=sys.stderr)
