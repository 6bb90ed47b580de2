"""Persistence: metrics CSV, binary chain files, JSON artifacts and the run manifest."""
from __future__ import annotations

import csv
import json
import subprocess
from pathlib import Path

import numpy as np

CHAIN_MAGIC = b"BNNCHAIN1\n"
METRICS_HEADER = ("step", "split", "metric", "value")


def format_float(v: float) -> str:
    return "%.17g" % v


class MetricsLog:
    """Rows of (step, split, metric, value) with non-decreasing steps."""

    def __init__(self):
        self.rows: list[tuple[int, str, str, float]] = []

    def add(self, step: int, split: str, metric: str, value: float):
        if self.rows and step < self.rows[-1][0]:
            raise ValueError(f"metrics step went backwards: {step} after {self.rows[-1][0]}")
        self.rows.append((int(step), split, metric, float(value)))

    def add_series(self, split: str, metric: str, values, every: int = 1):
        """Log a per-step array; combine series with :meth:`merged` for ordering."""
        for i in range(0, len(values), every):
            self.add(i + 1, split, metric, values[i])

    def extend(self, rows):
        for r in sorted(rows, key=lambda r: r[0]):
            self.add(*r)

    def write(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(METRICS_HEADER)
            for step, split, metric, value in self.rows:
                w.writerow((step, split, metric, format_float(value)))


def series_rows(split: str, metric: str, values, every: int = 1):
    return [(i + 1, split, metric, float(values[i])) for i in range(0, len(values), every)]


def read_metrics(path) -> list[tuple[int, str, str, float]]:
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if tuple(header) != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        return [(int(s), sp, m, float(v)) for s, sp, m, v in r]


def write_chain(path, samples, burn_in: int = 0, thin: int = 1):
    samples = np.ascontiguousarray(np.atleast_2d(samples), dtype="<f8")
    count, dim = samples.shape
    header = {"dim": dim, "count": count, "dtype": "f64le", "burn_in": int(burn_in), "thin": int(thin)}
    with open(path, "wb") as f:
        f.write(CHAIN_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(samples.tobytes(order="C"))


def read_chain(path):
    """Returns (samples (count, dim), header dict)."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CHAIN_MAGIC):
        raise ValueError("not a chain file: bad magic")
    rest = raw[len(CHAIN_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    if header.get("dtype") != "f64le":
        raise ValueError(f"unsupported chain dtype {header.get('dtype')!r}")
    body = rest[nl + 1:]
    count, dim = header["count"], header["dim"]
    if len(body) != 8 * count * dim:
        raise ValueError("chain file truncated or oversized")
    return np.frombuffer(body, dtype="<f8").reshape(count, dim).copy(), header


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def version_string() -> str:
    """git describe of the source tree when available, else the package version."""
    from .. import __version__
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__
