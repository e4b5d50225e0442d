"""File formats: GeoJSON polygons, event CSVs, JSON artifacts and grid round-trips.

Artifacts are written deterministically: JSON keys are sorted, floats use
Python's shortest round-trip representation and CSV floats are printed
with 17 significant digits, so identical inputs give identical bytes.
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import math
import os
from pathlib import Path

import numpy as np

from .errors import ArtifactError, ConfigError, InvalidGeometryError
from .geometry import CaseEvents, MultiPolygon, Polygon, RegularGrid, union_of

CSV_FLOAT = "%.17g"


# ---------------------------------------------------------------------------
# JSON


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_json(path, obj):
    _write_text(path, dumps(obj))


def read_json(path):
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ArtifactError(f"{path}: file not found") from exc
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    except OSError as exc:
        raise ArtifactError(f"{path}: {exc}") from exc


def _write_text(path, text):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise ArtifactError(f"{path}: {exc}") from exc


def config_hash(config: dict, files=()) -> str:
    """SHA-256 over the canonical JSON of ``config`` and the bytes of ``files``."""
    h = hashlib.sha256(dumps(config).encode())
    for f in files:
        if f is None:
            continue
        try:
            h.update(Path(f).read_bytes())
        except OSError as exc:
            raise ArtifactError(f"{f}: {exc}") from exc
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# GeoJSON


def _polygon_from_coords(rings, where):
    try:
        exterior = [tuple(map(float, p[:2])) for p in rings[0]]
        holes = tuple(tuple(tuple(map(float, p[:2])) for p in r) for r in rings[1:])
    except (TypeError, ValueError, IndexError) as exc:
        raise InvalidGeometryError(f"{where}: malformed polygon coordinates") from exc
    return Polygon(exterior, holes)


def geometry_to_shape(geom, where="geometry"):
    if not isinstance(geom, dict) or "type" not in geom:
        raise InvalidGeometryError(f"{where}: missing geometry")
    kind = geom["type"]
    if kind == "Polygon":
        return _polygon_from_coords(geom["coordinates"], where)
    if kind == "MultiPolygon":
        return MultiPolygon(tuple(_polygon_from_coords(c, where) for c in geom["coordinates"]))
    raise InvalidGeometryError(f"{where}: unsupported geometry type {kind!r}")


def shape_to_geometry(shape):
    def rings(p):
        return [[list(pt) for pt in p.exterior]] + [[list(pt) for pt in h] for h in p.holes]

    if isinstance(shape, MultiPolygon):
        return {"type": "MultiPolygon", "coordinates": [rings(p) for p in shape.polygons]}
    return {"type": "Polygon", "coordinates": rings(shape)}


def read_geojson(path):
    """Return ``[(shape, properties)]`` from a FeatureCollection, Feature or geometry."""
    data = read_json(path)
    if data.get("type") == "FeatureCollection":
        feats = data.get("features")
        if not isinstance(feats, list):
            raise ConfigError(f"{path}: FeatureCollection without a features list")
    elif data.get("type") == "Feature":
        feats = [data]
    else:
        feats = [{"type": "Feature", "geometry": data, "properties": {}}]
    out = []
    for k, f in enumerate(feats):
        where = f"{path}: feature {k}"
        out.append((geometry_to_shape(f.get("geometry"), where), dict(f.get("properties") or {})))
    if not out:
        raise ConfigError(f"{path}: no features")
    return out


def feature_collection(features):
    return {"type": "FeatureCollection", "features": features}


def write_geojson(path, shapes, properties):
    feats = [
        {"type": "Feature", "geometry": shape_to_geometry(s), "properties": p}
        for s, p in zip(shapes, properties)
    ]
    write_json(path, feature_collection(feats))


# ---------------------------------------------------------------------------
# events


PERIOD_DAYS = {"day": 1, "week": 7}


def _period_index(dates, laglength, period):
    latest = max(dates)
    idx = []
    for d in dates:
        if period == "month":
            back = (latest.year - d.year) * 12 + (latest.month - d.month)
        else:
            back = (latest - d).days // PERIOD_DAYS[period]
        idx.append(laglength - back)
    return np.array(idx, dtype=int)


def read_events_csv(path, laglength=1, period="day"):
    """Read ``x,y`` plus optional ``t`` (1-based period) or ``date`` (ISO) columns.

    Dates are binned into ``period`` units counting back from the latest
    date, which falls in period ``laglength``; older events are discarded.
    Returns ``(events, n_discarded)``.
    """
    path = Path(path)
    if period not in ("day", "week", "month"):
        raise ConfigError(f"unknown period {period!r}")
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            fields = reader.fieldnames or []
            for col in ("x", "y"):
                if col not in fields:
                    raise ConfigError(f"{path}: missing column {col!r}")
            xs, ys, ts, dates = [], [], [], []
            for line, row in enumerate(reader, start=2):
                try:
                    xs.append(float(row["x"]))
                    ys.append(float(row["y"]))
                    if "t" in fields and row["t"] not in (None, ""):
                        ts.append(int(row["t"]))
                    elif "date" in fields:
                        dates.append(dt.date.fromisoformat(row["date"].strip()[:10]))
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{path}: line {line}: {exc}") from exc
    except FileNotFoundError as exc:
        raise ArtifactError(f"{path}: file not found") from exc
    except OSError as exc:
        raise ArtifactError(f"{path}: {exc}") from exc
    x, y = np.array(xs), np.array(ys)
    if dates and len(dates) == len(xs):
        t = _period_index(dates, laglength, period)
        labels = sorted({d.isoformat() for d in dates})
    elif ts and len(ts) == len(xs):
        t = np.array(ts, dtype=int)
        labels = []
    elif not xs:
        t = np.zeros(0, dtype=int)
        labels = []
    elif not ts and not dates:
        if laglength != 1:
            raise ConfigError(f"{path}: events need a 't' or 'date' column when laglength > 1")
        t = np.ones(len(xs), dtype=int)
        labels = []
    else:
        raise ConfigError(f"{path}: time column is incomplete")
    keep = (t >= 1) & (t <= laglength)
    events = CaseEvents(x[keep], y[keep], t[keep], labels)
    return events, int((~keep).sum())


# ---------------------------------------------------------------------------
# CSV


def write_csv(path, header, rows):
    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return CSV_FLOAT % float(v) if math.isfinite(v) else "NA"
        return str(v)

    lines = [",".join(header)]
    lines.extend(",".join(fmt(v) for v in r) for r in rows)
    _write_text(path, "\n".join(lines) + "\n")


def read_csv_matrix(path):
    """Read a numeric CSV with a header; returns ``(header, array)``."""
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [[float(v) for v in r] for r in reader if r]
    except FileNotFoundError as exc:
        raise ArtifactError(f"{path}: file not found") from exc
    except (OSError, ValueError, StopIteration) as exc:
        raise ArtifactError(f"{path}: {exc}") from exc
    return header, np.array(rows).reshape(len(rows), len(header))


# ---------------------------------------------------------------------------
# grid artifacts


def cell_polygon(grid, i):
    x0, y0, x1, y1 = grid.cell_bounds(i)
    return Polygon([(x0, y0), (x1, y0), (x1, y1), (x0, y1)])


def grid_properties(grid, extra=None):
    """Per-cell property dicts: id, counts ``y_t`` and covariates ``name_t``."""
    props = []
    for i in range(grid.n):
        p = {"cell_id": int(grid.cell_ids[i]), "index": i, "overlap_area": float(grid.overlap_area[i])}
        for t in range(grid.T):
            p[f"y_{t + 1}"] = int(grid.counts[i, t])
        for name in sorted(grid.covariates):
            for t in range(grid.T):
                p[f"{name}_{t + 1}"] = float(grid.covariates[name][i, t])
        if extra:
            for k, v in extra.items():
                p[k] = v[i]
        props.append(p)
    return props


def write_grid(outdir, grid, meta):
    outdir = Path(outdir)
    shapes = [cell_polygon(grid, i) for i in range(grid.n)]
    write_geojson(outdir / "grid.geojson", shapes, grid_properties(grid))
    full = dict(meta)
    full.update(
        {
            "n": grid.n,
            "T": grid.T,
            "cellsize": grid.cellsize,
            "lattice": list(grid.lattice),
            "ordering": grid.ordering,
            "dropped": list(grid.dropped),
            "outside_boundary": list(grid.outside_boundary),
            "covariates": sorted(grid.covariates),
            "boundary": shape_to_geometry(grid.boundary),
        }
    )
    write_json(outdir / "grid_meta.json", full)


def read_grid(outdir):
    """Rebuild a :class:`RegularGrid` and its metadata from a grid artifact."""
    outdir = Path(outdir)
    if not (outdir / "grid_meta.json").exists():
        raise ArtifactError(f"{outdir}: no grid artifact found; run the 'grid' command first")
    meta = read_json(outdir / "grid_meta.json")
    feats = read_json(outdir / "grid.geojson")["features"]
    T = int(meta["T"])
    xmin, ymin, nx, ny = meta["lattice"]
    h = float(meta["cellsize"])
    props = [f["properties"] for f in feats]
    ids = np.array([p["cell_id"] for p in props], dtype=np.int64)
    counts = np.array([[p[f"y_{t + 1}"] for t in range(T)] for p in props], dtype=np.int64).reshape(len(props), T)
    covs = {
        name: np.array([[p[f"{name}_{t + 1}"] for t in range(T)] for p in props], dtype=float).reshape(len(props), T)
        for name in meta["covariates"]
    }
    grid = RegularGrid(
        origin_x=xmin + (ids % nx) * h,
        origin_y=ymin + (ids // nx) * h,
        cellsize=h,
        boundary=geometry_to_shape(meta["boundary"]),
        cell_ids=ids,
        lattice=(float(xmin), float(ymin), int(nx), int(ny)),
        overlap_area=np.array([p["overlap_area"] for p in props], dtype=float),
        T=T,
        counts=counts,
        covariates=covs,
        dropped=list(meta["dropped"]),
        outside_boundary=list(meta["outside_boundary"]),
        ordering=meta["ordering"],
    )
    return grid, meta


def env_output_dir(default="."):
    return os.environ.get("LGCP_OUTPUT_DIR", default)


__all__ = [
    "read_geojson",
    "write_geojson",
    "read_events_csv",
    "write_json",
    "read_json",
    "write_csv",
    "read_csv_matrix",
    "write_grid",
    "read_grid",
    "config_hash",
    "union_of",
]
