"""Reading observation tables and reading/writing model and report files.

Observation files are CSV (with a header row) or JSON lines. Columns
``x_1..x_p`` hold the observation and exactly one covariance encoding must be
present: ``s2`` (isotropic), ``s2_1..s2_p`` (diagonal) or the row-major lower
triangle ``cov_11, cov_21, cov_22, ...`` (full).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import NPMLEError
from .model import Dataset, Diagonal, Full, Isotropic

SCHEMA_VERSION = 1

_X = re.compile(r"^x_(\d+)$")
_S2 = re.compile(r"^s2_(\d+)$")
_COV = re.compile(r"^cov_(\d+)(\d+)$|^cov_(\d+)_(\d+)$")


class InputError(NPMLEError, ValueError):
    """Malformed or inconsistent observation file."""


@dataclass(eq=False)
class Table:
    """Parsed observation file: the dataset plus the raw rows for echoing."""

    data: Dataset
    header: list
    rows: list
    encoding: str
    sha256: str


def _cov_index(name):
    m = _COV.match(name)
    if not m:
        return None
    i, j = (m.group(1), m.group(2)) if m.group(1) else (m.group(3), m.group(4))
    return int(i), int(j)


def _layout(header):
    xs = sorted((int(_X.match(h).group(1)), h) for h in header if _X.match(h))
    p = len(xs)
    if p == 0 or [k for k, _ in xs] != list(range(1, p + 1)):
        raise InputError("header must contain columns x_1..x_p")
    iso = "s2" in header
    diag = sorted(int(_S2.match(h).group(1)) for h in header if _S2.match(h))
    full = {_cov_index(h): h for h in header if _cov_index(h)}
    present = [name for name, on in (("isotropic", iso), ("diagonal", diag), ("full", full)) if on]
    if len(present) != 1:
        raise InputError(f"exactly one covariance encoding is required, found {present or 'none'}")
    kind = present[0]
    if kind == "diagonal" and diag != list(range(1, p + 1)):
        raise InputError(f"diagonal encoding needs s2_1..s2_{p}")
    if kind == "full":
        want = {(i, j) for i in range(1, p + 1) for j in range(1, i + 1)}
        if set(full) != want:
            raise InputError(f"full encoding needs the lower triangle cov_ij, i >= j, for p = {p}")
    return p, kind, [h for _, h in xs], full


def _parse_float(value, row, col):
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise InputError(f"row {row}: column {col!r} is not a number: {value!r}") from None
    if not math.isfinite(v):
        raise InputError(f"row {row}: column {col!r} is not finite")
    return v


def _parse_rows(header, records):
    p, kind, xcols, full = _layout(header)
    X = np.empty((len(records), p))
    covs = []
    for r, rec in enumerate(records, start=1):
        X[r - 1] = [_parse_float(rec.get(c), r, c) for c in xcols]
        try:
            if kind == "isotropic":
                covs.append(Isotropic(_parse_float(rec.get("s2"), r, "s2"), p))
            elif kind == "diagonal":
                covs.append(Diagonal([_parse_float(rec.get(f"s2_{k}"), r, f"s2_{k}") for k in range(1, p + 1)]))
            else:
                lower = [_parse_float(rec.get(full[(i, j)]), r, full[(i, j)])
                         for i in range(1, p + 1) for j in range(1, i + 1)]
                covs.append(Full.from_lower(lower, p))
        except InputError:
            raise
        except (ValueError, NPMLEError) as exc:
            raise InputError(f"row {r}: invalid covariance: {exc}") from None
    if not records:
        raise InputError("input has no rows")
    return Dataset.from_arrays(X, covs), kind


def read_table(path) -> Table:
    """Parse a CSV or JSON-lines observation file."""
    path = Path(path)
    raw = path.read_bytes()
    digest = hashlib.sha256(raw).hexdigest()
    text = raw.decode("utf-8")
    if path.suffix.lower() in (".jsonl", ".ndjson"):
        records = []
        for r, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"row {r}: invalid JSON: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise InputError(f"row {r}: expected a JSON object")
            if "x" in rec:
                x = rec.pop("x")
                x = x if isinstance(x, list) else [x]
                rec.update({f"x_{k + 1}": v for k, v in enumerate(x)})
            records.append(rec)
        header = list(dict.fromkeys(k for rec in records for k in rec))
    else:
        reader = csv.DictReader(text.splitlines())
        header = [h.strip() for h in (reader.fieldnames or [])]
        reader.fieldnames = header
        records = list(reader)
        for r, rec in enumerate(records, start=1):
            if None in rec or any(v is None for v in rec.values()):
                raise InputError(f"row {r}: wrong number of fields")
    data, kind = _parse_rows(header, records)
    return Table(data, header, records, kind, digest)


# ------------------------------------------------------------------ JSON output

def fmt(x: float) -> str:
    """17 significant digits; parses back to the identical double."""
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def _encode(obj, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _encode(v, indent, level + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = (f"{pad}{json.dumps(str(k))}: {_encode(v, indent, level + 1)}" for k, v in obj.items())
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent: int = 2) -> str:
    return _encode(obj, indent, 0) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def validate_model(d: dict) -> dict:
    """Check the structural invariants of a model file."""
    try:
        if d["schema_version"] != SCHEMA_VERSION:
            raise InputError(f"unsupported schema_version {d['schema_version']!r}")
        p = int(d["dim"])
        atoms = np.asarray(d["atoms"], dtype=float)
        w = np.asarray(d["weights"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed model file: {exc}") from None
    if atoms.ndim != 2 or atoms.shape != (w.size, p):
        raise InputError("model atoms and weights are length-inconsistent")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise InputError("model weights are not on the simplex")
    return d
