"""CSV ingestion and report serialization."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import re
from pathlib import Path

import numpy as np

from .errors import DuplicateRowError, InputError, SchemaError
from .regression import PanelDataset

REQUIRED = ("unit_id", "period", "y", "x")
OPTIONAL = ("z", "lat", "lon")
LOCATION_COLUMNS = ("unit_id", "period", "lat", "lon")
_CONTROL = re.compile(r"^w(\d+)$")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _read_rows(path) -> tuple[list[str], list[tuple[int, dict]]]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such file: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file")
        header = [h.strip() for h in reader.fieldnames]
        reader.fieldnames = header
        rows = [(reader.line_num, row) for row in reader]
    return header, rows


def _float(value, line: int, col: str, bad: list) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        v = math.nan
    if not math.isfinite(v):
        bad.append(f"line {line} column {col}")
    return v


def _check_duplicates(keys: list[tuple], lines: list[int], path) -> None:
    seen: dict[tuple, int] = {}
    dups = []
    for key, line in zip(keys, lines):
        if key in seen:
            dups.append(f"(unit={key[0]}, period={key[1]}) at lines {seen[key]} and {line}")
        else:
            seen[key] = line
    if dups:
        raise DuplicateRowError(f"{path}: duplicate rows: " + "; ".join(dups[:10]))


def _unit_key(value: str):
    value = value.strip()
    try:
        return int(value)
    except ValueError:
        return value


def load_locations(path) -> dict[tuple, tuple[float, float]]:
    """Map ``(unit_id, period) -> (lat, lon)`` from a ``unit_id,period,lat,lon`` CSV."""
    header, rows = _read_rows(path)
    missing = [c for c in LOCATION_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}; expected {list(LOCATION_COLUMNS)}, got {header}")
    bad: list[str] = []
    out, keys, lines = {}, [], []
    for line, row in rows:
        p = _float(row["period"], line, "period", bad)
        key = (_unit_key(row["unit_id"] or ""), int(p) if math.isfinite(p) else 0)
        out[key] = (_float(row["lat"], line, "lat", bad), _float(row["lon"], line, "lon", bad))
        keys.append(key)
        lines.append(line)
    if bad:
        raise InputError(f"{path}: missing or non-numeric values at " + ", ".join(bad[:20]))
    _check_duplicates(keys, lines, path)
    return out


def load_dataset(path, locations=None) -> PanelDataset:
    """Read ``unit_id,period,y,x,w1..wp[,z][,lat,lon]`` into a dataset.

    Coordinates come from inline ``lat``/``lon`` columns or from ``locations``
    (a path or a mapping from :func:`load_locations`), looked up by
    ``(unit_id, period)`` and falling back to the unit's first listed location.
    """
    header, rows = _read_rows(path)
    controls = sorted((h for h in header if _CONTROL.match(h)), key=lambda h: int(h[1:]))
    missing = [c for c in REQUIRED if c not in header]
    unexpected = [h for h in header if h not in REQUIRED + OPTIONAL and h not in controls]
    if missing or unexpected:
        raise SchemaError(
            f"{path}: header mismatch; missing {missing}, unexpected {unexpected}; "
            f"expected unit_id,period,y,x,w1..wp[,z][,lat,lon]"
        )
    if ("lat" in header) != ("lon" in header):
        raise SchemaError(f"{path}: lat and lon must appear together")
    numeric = ["y", "x", *controls] + (["z"] if "z" in header else []) + (["lat", "lon"] if "lat" in header else [])
    bad: list[str] = []
    cols = {c: [] for c in numeric}
    unit, period, lines = [], [], []
    for line, row in rows:
        unit.append(_unit_key(row["unit_id"] or ""))
        p = _float(row["period"], line, "period", bad)
        period.append(int(p) if math.isfinite(p) else 0)
        lines.append(line)
        for c in numeric:
            cols[c].append(_float(row[c], line, c, bad))
    if bad:
        raise InputError(f"{path}: missing or non-numeric values at " + ", ".join(bad[:20]))
    if not rows:
        raise InputError(f"{path}: no data rows")
    _check_duplicates(list(zip(unit, period)), lines, path)
    coords = None
    if "lat" in header:
        coords = np.column_stack([cols["lat"], cols["lon"]])
    elif locations is not None:
        table = load_locations(locations) if not isinstance(locations, dict) else locations
        by_unit: dict = {}
        for (u, _), ll in table.items():
            by_unit.setdefault(u, ll)
        coords, absent = [], []
        for u, e, line in zip(unit, period, lines):
            ll = table.get((u, e), by_unit.get(u))
            if ll is None:
                absent.append(f"unit {u} (line {line})")
            coords.append(ll)
        if absent:
            raise InputError("no location for " + ", ".join(absent[:10]))
        coords = np.asarray(coords, dtype=float)
    w = np.column_stack([cols[c] for c in controls]) if controls else np.empty((len(rows), 0))
    return PanelDataset(
        y=np.array(cols["y"]), x=np.array(cols["x"]), w=w,
        z=np.array(cols["z"]) if "z" in header else None,
        unit_id=np.array(unit), period=np.array(period), coords=coords, control_names=controls,
    )


def load_dissimilarity(path, n: int | None = None) -> np.ndarray:
    """Headerless comma-separated ``n x n`` matrix."""
    try:
        d = np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read dissimilarity matrix {path}: {exc}") from None
    if d.shape[0] != d.shape[1]:
        raise SchemaError(f"{path}: dissimilarity must be square, got {d.shape}")
    if n is not None and d.shape[0] != n:
        raise SchemaError(f"{path}: dissimilarity is {d.shape[0]}x{d.shape[0]}, dataset has {n} rows")
    if not np.all(np.isfinite(d)):
        raise InputError(f"{path}: dissimilarity has non-finite entries")
    return d


# --- reports ---------------------------------------------------------------

def format_value(v) -> str:
    """Six significant digits for floats, blank for missing, as-is otherwise."""
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else "%.6g" % v
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def parse_value(s: str):
    if s == "":
        return None
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def emit_report(rows: list[dict], path, columns: list[str], fmt: str = "csv") -> Path:
    """Write rows with a fixed column order; floats at 6 significant digits."""
    path = Path(path)
    if not path.parent.is_dir():
        raise InputError(f"output directory does not exist: {path.parent}")
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([format_value(row.get(c)) for c in columns])
    elif fmt == "json":
        data = [{c: parse_value(format_value(row.get(c))) for c in columns} for row in rows]
        path.write_text(json.dumps({"columns": columns, "rows": data}, indent=2) + "\n")
    else:
        raise InputError(f"unknown report format {fmt!r}")
    return path


def read_report(path) -> tuple[list[str], list[dict]]:
    path = Path(path)
    if path.suffix == ".json":
        data = json.loads(path.read_text())
        return data["columns"], data["rows"]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        columns = next(reader)
        return columns, [dict(zip(columns, map(parse_value, r))) for r in reader]
