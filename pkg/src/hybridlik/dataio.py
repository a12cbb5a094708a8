"""Dataset ingestion, embedded example data and versioned run reports."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

SCHEMA = "hybridlik/1"


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass(frozen=True)
class Dataset:
    name: str
    values: np.ndarray          # (n,) univariate or (n, d+1) with y first
    columns: tuple
    provenance: str = ""

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def y(self) -> np.ndarray:
        return self.values if self.values.ndim == 1 else self.values[:, 0]

    @property
    def X(self) -> np.ndarray:
        if self.values.ndim == 1:
            raise DataError(f"dataset {self.name!r} has no covariates")
        return self.values[:, 1:]

    def checksum(self) -> str:
        """SHA-256 of the values written with 17 significant digits."""
        flat = np.atleast_2d(self.values.T).T
        text = "\n".join(",".join(format(float(v), ".17g") for v in row) for row in flat)
        return hashlib.sha256(text.encode("ascii")).hexdigest()


def _read_rows(fh, source):
    reader = csv.reader(fh)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError(f"{source}: empty dataset") from None
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{source}: row {lineno} has {len(row)} fields, expected {len(header)}")
        rows.append((lineno, row))
    return header, rows


def load_csv(path, schema: str = "univariate", name: str | None = None) -> Dataset:
    """Read a headed UTF-8 CSV.

    ``univariate`` needs a ``y`` column (other columns are ignored);
    ``regression`` needs ``y`` plus at least one covariate column.
    """
    if schema not in ("univariate", "regression"):
        raise ValueError(f"unknown schema {schema!r}")
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        header, rows = _read_rows(fh, path.name)
    if "y" not in header:
        raise DataError(f"{path.name}: missing column 'y'")
    if schema == "univariate":
        cols = ["y"]
    else:
        cols = ["y"] + [h for h in header if h != "y"]
        if len(cols) < 2:
            raise DataError(f"{path.name}: regression data need at least one covariate column")
    if not rows:
        raise DataError(f"{path.name}: empty dataset")
    idx = [header.index(c) for c in cols]
    out = np.empty((len(rows), len(cols)))
    for i, (lineno, row) in enumerate(rows):
        for j, k in enumerate(idx):
            cell = row[k].strip()
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path.name}: non-numeric cell {cell!r} at row {lineno}, column {cols[j]!r}") from None
            if not math.isfinite(v):
                raise DataError(f"{path.name}: non-finite cell at row {lineno}, column {cols[j]!r}")
            out[i, j] = v
    values = out[:, 0] if schema == "univariate" else out
    return Dataset(name=name or path.stem, values=values, columns=tuple(cols),
                   provenance=str(path))


# ---------------------------------------------------------------------------
# embedded data

EMBEDDED = {
    "newcomb": ("newcomb.csv",
                "Newcomb (1882) passage-time measurements of the speed of light, 66 values "
                "recorded as deviations from 24.8 (units of 1e-3 microseconds); Stigler (1977)."),
}

# Not redistributed here; point this variable at a one-column CSV with header ``y``.
EGYPT_ENV = "HYBRIDLIK_EGYPT_CSV"


def load_dataset(name: str) -> Dataset:
    """Load an embedded dataset by name.

    ``egypt`` (Roman-era Egyptian life lengths, 141 values) is read from the
    file named by the ``HYBRIDLIK_EGYPT_CSV`` environment variable.
    """
    if name in EMBEDDED:
        fname, note = EMBEDDED[name]
        ref = resources.files("hybridlik").joinpath("data", fname)
        with resources.as_file(ref) as path:
            ds = load_csv(path, "univariate", name=name)
        return Dataset(name=name, values=ds.values, columns=ds.columns, provenance=note)
    if name == "egypt":
        path = os.environ.get(EGYPT_ENV)
        if not path:
            raise DataError(f"dataset 'egypt' is not bundled; set {EGYPT_ENV} to a CSV with a 'y' column")
        ds = load_csv(path, "univariate", name="egypt")
        if ds.n != 141:
            raise DataError(f"egypt data should have 141 rows, found {ds.n}")
        return ds
    raise DataError(f"unknown dataset {name!r}; available: {sorted(list(EMBEDDED) + ['egypt'])}")


# ---------------------------------------------------------------------------
# reports


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)  # "nan", "inf", "-inf"
    return obj


@dataclass
class RunReport:
    """Self-describing record of one CLI run; JSON floats round-trip exactly."""

    command: str
    request: dict
    results: dict = field(default_factory=dict)
    seed: int | None = None
    timing_seconds: float = 0.0
    version: str = ""
    schema: str = SCHEMA

    def to_dict(self) -> dict:
        return _to_jsonable({
            "schema": self.schema, "version": self.version, "command": self.command,
            "request": self.request, "seed": self.seed, "timing_seconds": self.timing_seconds,
            "results": self.results,
        })

    def to_json(self) -> str:
        # Python's float repr is the shortest string that round-trips (<= 17 digits)
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        if d.get("schema") != SCHEMA:
            raise DataError(f"unsupported report schema {d.get('schema')!r}")
        return cls(command=d["command"], request=d["request"], results=d.get("results", {}),
                   seed=d.get("seed"), timing_seconds=d.get("timing_seconds", 0.0),
                   version=d.get("version", ""), schema=d["schema"])

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls.from_dict(json.loads(text))

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path


def write_table(path, header, rows) -> Path:
    """CSV with one header row, LF line endings and 17-significant-digit floats."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format(v, ".17g") if isinstance(v, (float, np.floating)) else v for v in row])
    return path
