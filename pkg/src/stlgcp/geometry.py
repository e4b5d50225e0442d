"""Polygons, the computational grid and everything that maps data onto it.

All geometry is planar.  Polygon/cell overlap areas are computed by
Sutherland-Hodgman clipping of the (possibly concave) polygon against the
axis-aligned cell, which is exact for area because the clip window is
convex.  Holes are clipped separately and subtracted.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import (
    ConfigError,
    InvalidGeometryError,
    NoCoverageError,
    ResourceLimitError,
    UnknownCovariateError,
)

MAX_CELLS = 100_000
COVERAGE_GAP_TOLERANCE = 0.05
_AREA_EPS = 1e-12


def ring_area(pts) -> float:
    """Signed shoelace area of an open ring (no repeated closing vertex)."""
    if len(pts) < 3:
        return 0.0
    a = 0.0
    x0, y0 = pts[-1]
    for x1, y1 in pts:
        a += x0 * y1 - x1 * y0
        x0, y0 = x1, y1
    return 0.5 * a


def _clip_half(pts, axis, value, keep_above):
    # one Sutherland-Hodgman pass against the half-plane coord[axis] >=/<= value
    out = []
    if not pts:
        return out
    prev = pts[-1]
    pin = prev[axis] >= value if keep_above else prev[axis] <= value
    for cur in pts:
        cin = cur[axis] >= value if keep_above else cur[axis] <= value
        if cin != pin:
            t = (value - prev[axis]) / (cur[axis] - prev[axis])
            if axis == 0:
                out.append((value, prev[1] + t * (cur[1] - prev[1])))
            else:
                out.append((prev[0] + t * (cur[0] - prev[0]), value))
        if cin:
            out.append(cur)
        prev, pin = cur, cin
    return out


def clip_ring_band(pts, axis, lo, hi):
    return _clip_half(_clip_half(pts, axis, lo, True), axis, hi, False)


def clip_ring_rect(pts, xmin, ymin, xmax, ymax):
    """Clip an open ring to a rectangle; returns the clipped open ring."""
    return clip_ring_band(clip_ring_band(pts, 0, xmin, xmax), 1, ymin, ymax)


def _open_ring(coords):
    pts = [(float(x), float(y)) for x, y in coords]
    if len(pts) >= 2 and pts[0] == pts[-1]:
        pts = pts[:-1]
    return pts


@dataclass(frozen=True)
class Polygon:
    """Planar polygon with optional holes.

    ``exterior`` and ``holes`` are stored closed (first vertex repeated).
    Open rings are closed on construction.
    """

    exterior: tuple
    holes: tuple = ()

    def __post_init__(self):
        ext = _open_ring(self.exterior)
        if len(ext) < 3:
            raise InvalidGeometryError("polygon ring needs at least 3 distinct vertices")
        if abs(ring_area(ext)) <= 0.0:
            raise InvalidGeometryError("polygon exterior has zero area")
        holes = tuple(tuple(_open_ring(h)) for h in self.holes)
        object.__setattr__(self, "exterior", tuple(ext) + (ext[0],))
        object.__setattr__(self, "holes", tuple(h + (h[0],) for h in holes if len(h) >= 3))

    @property
    def rings(self):
        return [list(self.exterior[:-1])] + [list(h[:-1]) for h in self.holes]

    @property
    def area(self) -> float:
        rings = self.rings
        return abs(ring_area(rings[0])) - sum(abs(ring_area(h)) for h in rings[1:])

    @property
    def bounds(self):
        xs = [p[0] for p in self.exterior]
        ys = [p[1] for p in self.exterior]
        return min(xs), min(ys), max(xs), max(ys)

    @property
    def parts(self):
        return (self,)

    def clip_area(self, xmin, ymin, xmax, ymax) -> float:
        rings = self.rings
        a = abs(ring_area(clip_ring_rect(rings[0], xmin, ymin, xmax, ymax)))
        for h in rings[1:]:
            a -= abs(ring_area(clip_ring_rect(h, xmin, ymin, xmax, ymax)))
        return max(a, 0.0)

    def contains(self, x, y):
        """Even-odd point-in-polygon test, vectorised over ``x``/``y``."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        inside = np.zeros(np.broadcast(x, y).shape, dtype=bool)
        for ring in self.rings:
            inside ^= _ring_contains(ring, x, y)
        return inside


def _ring_contains(ring, x, y):
    pts = np.asarray(ring, dtype=float)
    xi, yi = pts[:, 0], pts[:, 1]
    xj, yj = np.roll(xi, 1), np.roll(yi, 1)
    res = np.zeros(np.broadcast(x, y).shape, dtype=bool)
    for a, b, c, d in zip(xi, yi, xj, yj):
        if b == d:
            continue
        crosses = (b > y) != (d > y)
        xint = (c - a) * (y - b) / (d - b) + a
        res ^= crosses & (x < xint)
    return res


@dataclass(frozen=True)
class MultiPolygon:
    polygons: tuple

    def __post_init__(self):
        if not self.polygons:
            raise InvalidGeometryError("empty multipolygon")
        object.__setattr__(self, "polygons", tuple(self.polygons))

    @property
    def parts(self):
        return self.polygons

    @property
    def area(self) -> float:
        return sum(p.area for p in self.polygons)

    @property
    def bounds(self):
        b = np.array([p.bounds for p in self.polygons])
        return b[:, 0].min(), b[:, 1].min(), b[:, 2].max(), b[:, 3].max()

    def clip_area(self, xmin, ymin, xmax, ymax) -> float:
        return sum(p.clip_area(xmin, ymin, xmax, ymax) for p in self.polygons)

    def contains(self, x, y):
        out = self.polygons[0].contains(x, y)
        for p in self.polygons[1:]:
            out = out | p.contains(x, y)
        return out


def as_shape(obj):
    """Coerce a Polygon, MultiPolygon, coordinate list or list of polygons."""
    if isinstance(obj, (Polygon, MultiPolygon)):
        return obj
    if isinstance(obj, (list, tuple)) and obj and all(isinstance(p, Polygon) for p in obj):
        return obj[0] if len(obj) == 1 else MultiPolygon(tuple(obj))
    return Polygon(tuple(obj))


def union_of(shapes):
    parts = []
    for s in shapes:
        parts.extend(as_shape(s).parts)
    return parts[0] if len(parts) == 1 else MultiPolygon(tuple(parts))


@dataclass
class CaseEvents:
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    timestamps: list = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.t = np.ones(self.x.shape, dtype=int) if self.t is None else np.asarray(self.t, dtype=int)
        if not (self.x.shape == self.y.shape == self.t.shape):
            raise ConfigError("event coordinate and time arrays differ in length")

    def __len__(self):
        return self.x.size


@dataclass
class RegularGrid:
    """Square cells clipped to a boundary, with per-cell, per-period data.

    Cells are identified by ``cell_ids``, their row-major index in the
    bounding lattice, so that the identity of a cell survives reordering.
    ``counts`` and every entry of ``covariates`` are ``(n, T)`` arrays.
    """

    origin_x: np.ndarray
    origin_y: np.ndarray
    cellsize: float
    boundary: object
    cell_ids: np.ndarray
    lattice: tuple
    overlap_area: np.ndarray
    T: int = 1
    counts: np.ndarray = None
    covariates: dict = field(default_factory=dict)
    dropped: list = field(default_factory=list)
    outside_boundary: list = field(default_factory=list)
    ordering: str = "none"

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.n, self.T), dtype=np.int64)

    @property
    def n(self) -> int:
        return int(self.origin_x.size)

    @property
    def centres(self) -> np.ndarray:
        h = self.cellsize
        return np.column_stack([self.origin_x + h / 2, self.origin_y + h / 2])

    def cell_bounds(self, i):
        h = self.cellsize
        return self.origin_x[i], self.origin_y[i], self.origin_x[i] + h, self.origin_y[i] + h

    def values(self, name):
        if name in ("y", "counts"):
            return self.counts.astype(float)
        try:
            return self.covariates[name]
        except KeyError:
            raise UnknownCovariateError(f"unknown grid column {name!r}") from None

    def candidate_cells(self, bounds):
        """Indices of cells whose square overlaps the bounding box ``bounds``."""
        xmin, ymin, xmax, ymax = bounds
        h = self.cellsize
        mask = (
            (self.origin_x < xmax)
            & (self.origin_x + h > xmin)
            & (self.origin_y < ymax)
            & (self.origin_y + h > ymin)
        )
        return np.flatnonzero(mask)


def build_grid(boundary, cellsize: float, max_cells: int = MAX_CELLS) -> RegularGrid:
    """Lay a square lattice over the boundary's bounding box.

    Only cells whose overlap with the boundary has positive area are kept;
    cells are listed row-major (bottom row first, left to right).
    """
    boundary = as_shape(boundary)
    if boundary.area <= 0:
        raise InvalidGeometryError("boundary has zero area")
    if not cellsize > 0:
        raise ConfigError("cellsize must be positive")
    xmin, ymin, xmax, ymax = boundary.bounds
    if cellsize >= xmax - xmin or cellsize >= ymax - ymin:
        raise ConfigError("cellsize must be smaller than the boundary extent in each dimension")
    nx = int(math.ceil((xmax - xmin) / cellsize - 1e-9))
    ny = int(math.ceil((ymax - ymin) / cellsize - 1e-9))
    if nx * ny > max_cells:
        raise ResourceLimitError(
            f"cellsize {cellsize} gives {nx * ny} candidate cells (limit {max_cells})"
        )
    lonlat = max(abs(xmin), abs(xmax)) <= 180 and max(abs(ymin), abs(ymax)) <= 90
    if lonlat and cellsize < 0.05 and max(abs(xmin), abs(ymin)) > 1:
        warnings.warn("coordinates look like lon/lat degrees; distances are treated as planar")

    tol = _AREA_EPS * cellsize * cellsize
    ox, oy, ids, areas = [], [], [], []
    rings = []
    for p in boundary.parts:
        rs = p.rings
        rings.append((rs[0], 1.0))
        rings.extend((hole, -1.0) for hole in rs[1:])
    for row in range(ny):
        y0 = ymin + row * cellsize
        y1 = y0 + cellsize
        band = [(clip_ring_band(r, 1, y0, y1), s) for r, s in rings]
        band = [(r, s) for r, s in band if len(r) >= 3]
        if not band:
            continue
        for col in range(nx):
            x0 = xmin + col * cellsize
            x1 = x0 + cellsize
            a = 0.0
            for r, s in band:
                a += s * abs(ring_area(clip_ring_band(r, 0, x0, x1)))
            if a > tol:
                ox.append(x0)
                oy.append(y0)
                ids.append(row * nx + col)
                areas.append(a)
    return RegularGrid(
        origin_x=np.array(ox),
        origin_y=np.array(oy),
        cellsize=float(cellsize),
        boundary=boundary,
        cell_ids=np.array(ids, dtype=np.int64),
        lattice=(xmin, ymin, nx, ny),
        overlap_area=np.array(areas),
    )


def points_to_grid(grid: RegularGrid, events: CaseEvents, laglength: int = 1) -> RegularGrid:
    """Tally events into ``(n, laglength)`` cell counts.

    Cells are half-open, ``[x0, x0 + h) x [y0, y0 + h)``.  Events falling in
    no retained cell are dropped and counted per period in ``grid.dropped``;
    events inside a cell but outside the boundary are kept and counted in
    ``grid.outside_boundary``.
    """
    laglength = int(laglength)
    if laglength < 1:
        raise ConfigError("laglength must be a positive integer")
    if len(events) and (events.t.min() < 1 or events.t.max() > laglength):
        raise ConfigError("event period index outside 1..laglength")
    xmin, ymin, nx, ny = grid.lattice
    h = grid.cellsize
    lookup = np.full(nx * ny, -1, dtype=np.int64)
    lookup[grid.cell_ids] = np.arange(grid.n)
    col = np.floor((events.x - xmin) / h).astype(np.int64)
    row = np.floor((events.y - ymin) / h).astype(np.int64)
    ok = (col >= 0) & (col < nx) & (row >= 0) & (row < ny)
    cell = np.full(len(events), -1, dtype=np.int64)
    cell[ok] = lookup[row[ok] * nx + col[ok]]
    kept = cell >= 0
    counts = np.zeros((grid.n, laglength), dtype=np.int64)
    np.add.at(counts, (cell[kept], events.t[kept] - 1), 1)
    dropped = np.bincount(events.t[~kept] - 1, minlength=laglength)[:laglength]
    outside = np.zeros(laglength, dtype=np.int64)
    if kept.any():
        inb = grid.boundary.contains(events.x[kept], events.y[kept])
        outside = np.bincount(events.t[kept][~inb] - 1, minlength=laglength)[:laglength]
    covs = {k: _fit_periods(v, laglength) for k, v in grid.covariates.items()}
    return replace(
        grid,
        T=laglength,
        counts=counts,
        covariates=covs,
        dropped=[int(d) for d in dropped],
        outside_boundary=[int(o) for o in outside],
    )


def _fit_periods(v, T):
    if v.shape[1] == T:
        return v
    if np.allclose(v, v[:, :1]):
        return np.repeat(v[:, :1], T, axis=1)
    raise ConfigError("time-varying covariate does not match the new number of periods")


def add_covariates(
    grid: RegularGrid,
    source: Sequence,
    names: Sequence[str],
    weight_type: str = "area",
    popdens: str | None = None,
) -> RegularGrid:
    """Overlay polygon covariates onto the grid as overlap-weighted means.

    ``source`` is a sequence of ``(shape, values)`` pairs where ``values``
    maps names to numbers.  With ``weight_type="population"`` each overlap
    area is multiplied by the source's ``popdens`` value.  Gaps in coverage
    up to 5% of a cell's area are absorbed by renormalising; larger gaps
    raise :class:`NoCoverageError`.
    """
    if weight_type not in ("area", "population"):
        raise ConfigError(f"weight_type must be 'area' or 'population', got {weight_type!r}")
    if weight_type == "population" and popdens is None:
        raise ConfigError("population weighting needs the name of the density property")
    shapes = [as_shape(s) for s, _ in source]
    props = [v for _, v in source]
    for name in list(names) + ([popdens] if weight_type == "population" else []):
        if not all(name in p for p in props):
            raise UnknownCovariateError(f"covariate {name!r} missing from source polygons")

    n = grid.n
    num = np.zeros((n, len(names)))
    wsum = np.zeros(n)
    covered = np.zeros(n)
    for shape, p in zip(shapes, props):
        vals = np.array([float(p[k]) for k in names])
        dens = float(p[popdens]) if weight_type == "population" else 1.0
        for i in grid.candidate_cells(shape.bounds):
            a = shape.clip_area(*grid.cell_bounds(i))
            if a <= 0:
                continue
            covered[i] += a
            wsum[i] += a * dens
            num[i] += a * dens * vals
    cell_area = grid.cellsize ** 2
    gap = np.maximum(grid.overlap_area - covered, 0.0)
    bad = np.flatnonzero((wsum <= 0) | (gap > COVERAGE_GAP_TOLERANCE * cell_area))
    if bad.size:
        raise NoCoverageError(
            f"{bad.size} grid cells are not covered by the covariate polygons: {bad.tolist()[:20]}",
            bad,
        )
    covs = dict(grid.covariates)
    for k, name in enumerate(names):
        covs[name] = np.repeat((num[:, k] / wsum)[:, None], grid.T, axis=1)
    return replace(grid, covariates=covs)


@dataclass(frozen=True)
class IntersectionMap:
    """Non-empty region/cell intersections with area weights.

    Entries are sorted by region then cell; ``weight[k]`` is the fraction
    of region ``region[k]``'s area lying in cell ``cell[k]``.
    """

    cell: np.ndarray
    region: np.ndarray
    weight: np.ndarray
    n_regions: int
    area: np.ndarray = None

    def __post_init__(self):
        if np.any(self.weight <= 0):
            raise InvalidGeometryError("intersection weights must be positive")
        sums = np.bincount(self.region, weights=self.weight, minlength=self.n_regions)
        present = np.bincount(self.region, minlength=self.n_regions) > 0
        if np.any(np.abs(sums[present] - 1.0) > 1e-9):
            raise InvalidGeometryError("intersection weights do not sum to one within a region")

    @property
    def q(self) -> int:
        return int(self.cell.size)

    def region_sets(self):
        return [self.cell[self.region == j] for j in range(self.n_regions)]


def compute_intersections(grid: RegularGrid, regions: Sequence) -> IntersectionMap:
    cells, regs, wts, areas = [], [], [], []
    for j, reg in enumerate(regions):
        shape = as_shape(reg)
        total = shape.area
        if total <= 0:
            raise InvalidGeometryError(f"region {j} has zero area")
        idx = grid.candidate_cells(shape.bounds)
        found = []
        for i in idx:
            a = shape.clip_area(*grid.cell_bounds(i))
            if a > _AREA_EPS * total:
                found.append((int(i), a))
        found.sort()
        for i, a in found:
            cells.append(i)
            regs.append(j)
            wts.append(a / total)
            areas.append(a)
    return IntersectionMap(
        cell=np.array(cells, dtype=np.int64),
        region=np.array(regs, dtype=np.int64),
        weight=np.array(wts),
        n_regions=len(regions),
        area=np.array(areas),
    )


def _argbest(values, best, scale):
    # lowest index among entries within rounding of the optimum
    return int(np.flatnonzero(np.abs(values - best) <= 1e-12 * max(scale, 1.0))[0])


def minimax_order(grid_or_coords) -> np.ndarray:
    """Greedy max-min distance ordering; returns a 0-based permutation."""
    pts = grid_or_coords.centres if isinstance(grid_or_coords, RegularGrid) else np.asarray(grid_or_coords, float)
    n = pts.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    scale = float(np.ptp(pts, axis=0).max()) if n > 1 else 1.0
    d0 = np.hypot(*(pts - pts.mean(axis=0)).T)
    first = _argbest(d0, d0.min(), scale)
    order = [first]
    mind = np.hypot(*(pts - pts[first]).T)
    mind[first] = -np.inf
    for _ in range(n - 1):
        k = _argbest(mind, mind.max(), scale)
        order.append(k)
        mind = np.minimum(mind, np.hypot(*(pts - pts[k]).T))
        mind[order] = -np.inf
    return np.array(order, dtype=np.int64)


def reorder(grid: RegularGrid, method: str = "minimax", seed: int = 1) -> RegularGrid:
    """Return a copy of the grid with its cells permuted by ``method``."""
    if method == "none":
        perm = np.argsort(grid.cell_ids, kind="stable")
    elif method == "minimax":
        perm = minimax_order(grid)
    elif method == "random":
        perm = np.random.default_rng(seed).permutation(grid.n)
    elif method in ("y", "y-coordinate"):
        c = grid.centres
        perm = np.lexsort((c[:, 0], c[:, 1]))
    else:
        raise ConfigError(f"unknown ordering {method!r}")
    return permute(grid, perm, method)


def permute(grid: RegularGrid, perm, label="custom") -> RegularGrid:
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(grid.n)):
        raise ConfigError("ordering is not a permutation of the cells")
    return replace(
        grid,
        origin_x=grid.origin_x[perm],
        origin_y=grid.origin_y[perm],
        cell_ids=grid.cell_ids[perm],
        overlap_area=grid.overlap_area[perm],
        counts=grid.counts[perm],
        covariates={k: v[perm] for k, v in grid.covariates.items()},
        ordering=label,
    )


def add_time_indicators(grid: RegularGrid) -> RegularGrid:
    """Add ``time{k}i`` indicator covariates for periods 2..T."""
    if grid.T < 2:
        warnings.warn("single-period grid: no time indicators added")
        return grid
    covs = dict(grid.covariates)
    for k in range(2, grid.T + 1):
        ind = np.zeros((grid.n, grid.T))
        ind[:, k - 1] = 1.0
        covs[f"time{k}i"] = ind
    return replace(grid, covariates=covs)
