"""Pixel grid, CSV ingestion and aggregation into per pixel-year response tables."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .distributions import DAYS_IN_YEAR, date_to_z

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088
FULL_ROUTE_STOPS = 50
CLAMPED_LAST_DAY = 365.5
LANDCOVER_CLASSES = ("developed", "forest", "vegetation", "water")

SCHEMAS = {
    "pixels.csv": ("pixel_id", "lon", "lat", "area_km2"),
    "checklists.csv": ("lon", "lat", "year", "duration_min"),
    "occurrences.csv": ("lon", "lat", "year", "day", "present"),
    "bbs.csv": ("route_id", "year", "count", "stops"),
    "bbs_segments.csv": ("route_id", "pixel_id", "weight"),
    "nao.csv": ("year", "value"),
    "landcover.csv": ("pixel_id",) + LANDCOVER_CLASSES,
}
INTEGER_COLUMNS = {"pixel_id", "year", "route_id", "count", "stops", "present"}
TABLE_COLUMNS = ("pixel_id", "year", "n_ckl", "median_duration", "n_spc", "z")


class InputError(ValueError):
    """Malformed or inconsistent input file."""


@dataclass
class PixelGrid:
    pixel_id: np.ndarray
    lon: np.ndarray
    lat: np.ndarray
    area: np.ndarray
    years: np.ndarray
    pixel_km: float = 20.0
    origin: tuple[float, float] | None = None
    x_km: np.ndarray = field(init=False)
    y_km: np.ndarray = field(init=False)

    def __post_init__(self):
        self.pixel_id = np.asarray(self.pixel_id, dtype=np.int64)
        self.lon = np.asarray(self.lon, dtype=float)
        self.lat = np.asarray(self.lat, dtype=float)
        self.area = np.asarray(self.area, dtype=float)
        self.years = np.asarray(self.years, dtype=np.int64)
        if not np.array_equal(self.pixel_id, np.arange(len(self.pixel_id))):
            raise InputError("pixel ids must be unique and contiguous from 0")
        if np.any(self.area <= 0):
            raise InputError("pixel areas must be positive")
        if self.origin is None:
            self.origin = (float(self.lon.mean()), float(self.lat.mean()))
        self.x_km, self.y_km = self.project(self.lon, self.lat)

    @property
    def n_pixels(self) -> int:
        return len(self.pixel_id)

    @property
    def n_years(self) -> int:
        return len(self.years)

    @property
    def coords(self) -> np.ndarray:
        return np.column_stack([self.x_km, self.y_km])

    def project(self, lon, lat):
        """Equirectangular projection about the grid origin, in km."""
        lon0, lat0 = self.origin
        scale = EARTH_RADIUS_KM * math.pi / 180.0
        x = scale * math.cos(math.radians(lat0)) * (np.asarray(lon, dtype=float) - lon0)
        y = scale * (np.asarray(lat, dtype=float) - lat0)
        return x, y

    def unproject(self, x_km, y_km):
        lon0, lat0 = self.origin
        scale = EARTH_RADIUS_KM * math.pi / 180.0
        lon = lon0 + np.asarray(x_km, dtype=float) / (scale * math.cos(math.radians(lat0)))
        lat = lat0 + np.asarray(y_km, dtype=float) / scale
        return lon, lat

    def year_index(self, years):
        """Index into ``self.years``; -1 for years outside the grid."""
        years = np.asarray(years, dtype=np.int64)
        pos = np.searchsorted(self.years, years)
        pos = np.clip(pos, 0, len(self.years) - 1)
        return np.where(self.years[pos] == years, pos, -1)

    def locate(self, lon, lat):
        """Pixel index of each point, -1 when outside every pixel.

        Pixels are half-open squares ``[c - w/2, c + w/2)`` around their
        projected centres.
        """
        x, y = self.project(lon, lat)
        pts = np.column_stack([np.atleast_1d(x), np.atleast_1d(y)])
        if len(pts) == 0:
            return np.empty(0, dtype=np.int64)
        tree = cKDTree(self.coords)
        _, idx = tree.query(pts, k=min(4, self.n_pixels), p=np.inf)
        idx = np.atleast_2d(idx)
        if idx.shape[0] != len(pts):
            idx = idx.T
        half = 0.5 * self.pixel_km
        out = np.full(len(pts), -1, dtype=np.int64)
        for col in range(idx.shape[1]):
            cand = idx[:, col]
            dx = pts[:, 0] - self.x_km[cand]
            dy = pts[:, 1] - self.y_km[cand]
            inside = (dx >= -half) & (dx < half) & (dy >= -half) & (dy < half) & (out < 0)
            out[inside] = cand[inside]
        return out


@dataclass
class RouteDef:
    route_id: int
    year: int
    segments: list[tuple[int, float]]
    stops_visited: int

    def validate(self, n_pixels: int | None = None):
        total = sum(w for _, w in self.segments)
        if abs(total - 1.0) > 1e-9:
            raise InputError(f"route {self.route_id}: weights sum {total:.12g}")
        if not 1 <= self.stops_visited <= FULL_ROUTE_STOPS:
            raise InputError(f"route {self.route_id}: stops {self.stops_visited} outside [1, 50]")
        if any(not 0 <= w <= 1 for _, w in self.segments):
            raise InputError(f"route {self.route_id}: segment weight outside [0, 1]")
        if n_pixels is not None and any(not 0 <= p < n_pixels for p, _ in self.segments):
            raise InputError(f"route {self.route_id}: unknown pixel id")


def route_intensity_weights(route: RouteDef) -> list[tuple[int, float]]:
    """Per-pixel multipliers of the BBS Poisson mean (weight times visited/50)."""
    route.validate()
    frac = route.stops_visited / FULL_ROUTE_STOPS
    return [(p, w * frac) for p, w in route.segments]


@dataclass
class ResponseTables:
    """Aggregated responses on the (pixel, year) lattice.

    ``median_duration`` and ``z`` are NaN where absent; ``n_spc`` is only
    meaningful where ``n_ckl > 0``.
    """
    n_ckl: np.ndarray
    median_duration: np.ndarray
    n_spc: np.ndarray
    z: np.ndarray
    routes: list[RouteDef]
    n_bbs: np.ndarray
    nao: np.ndarray
    landcover: np.ndarray | None = None

    def validate(self):
        if np.any(self.n_ckl < 0) or np.any(self.n_spc < 0):
            raise InputError("negative counts")
        if np.any(self.n_spc > self.n_ckl):
            raise InputError("species count exceeds checklist count")
        has_z = ~np.isnan(self.z)
        if np.any(self.z[has_z] <= 0):
            raise InputError("transformed arrival values must be positive")
        if np.any(has_z & (self.n_spc < 1)):
            raise InputError("arrival value present without a species occurrence")
        if np.any(np.isnan(self.median_duration) != (self.n_ckl == 0)):
            raise InputError("median duration must be present exactly where checklists exist")
        if self.landcover is not None and np.any((self.landcover < 0) | (self.landcover > 1)):
            raise InputError("land-cover proportions must lie in [0, 1]")
        return self

    def equals(self, other: ResponseTables) -> bool:
        same = (np.array_equal(self.n_ckl, other.n_ckl)
                and np.array_equal(self.median_duration, other.median_duration, equal_nan=True)
                and np.array_equal(self.n_spc, other.n_spc)
                and np.array_equal(self.z, other.z, equal_nan=True)
                and np.array_equal(self.n_bbs, other.n_bbs)
                and np.array_equal(self.nao, other.nao))
        if not same or len(self.routes) != len(other.routes):
            return False
        return all(a == b for a, b in zip(self.routes, other.routes))


@dataclass
class RawRecords:
    checklists: np.ndarray | None = None  # columns lon, lat, year, duration
    occurrences: np.ndarray | None = None  # columns lon, lat, year, day, present
    bbs: np.ndarray | None = None  # columns route_id, year, count, stops
    nao: dict[int, float] = field(default_factory=dict)
    landcover: np.ndarray | None = None
    row_counts: dict[str, int] = field(default_factory=dict)


def read_csv(path, columns) -> np.ndarray:
    """Parse a headered numeric CSV into a float array, validating the header."""
    path = Path(path)
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path.name}:1: empty file") from None
        missing = [c for c in columns if c not in header]
        if missing:
            raise InputError(f"{path.name}:1: missing column(s) {', '.join(missing)}")
        pos = [header.index(c) for c in columns]
        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            vals = []
            for c, p in zip(columns, pos):
                cell = row[p].strip() if p < len(row) else ""
                try:
                    v = float(cell)
                except ValueError:
                    raise InputError(f"{path.name}:{line}: non-numeric value {cell!r} in column {c}") from None
                if c in INTEGER_COLUMNS and v != int(v):
                    raise InputError(f"{path.name}:{line}: column {c} must be an integer, got {cell!r}")
                vals.append(v)
            rows.append(vals)
    return np.asarray(rows, dtype=float).reshape(-1, len(columns))


def load_grid(path, years, pixel_km: float = 20.0) -> PixelGrid:
    arr = read_csv(path, SCHEMAS["pixels.csv"])
    ids = arr[:, 0].astype(np.int64)
    uniq, counts = np.unique(ids, return_counts=True)
    if np.any(counts > 1):
        raise InputError(f"{Path(path).name}: duplicate pixel_id {int(uniq[counts > 1][0])}")
    order = np.argsort(ids)
    arr = arr[order]
    return PixelGrid(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], years=np.asarray(sorted(years)),
                     pixel_km=pixel_km)


def load_routes(bbs_path, segments_path, n_pixels: int | None = None):
    """Route definitions (one per surveyed route-year) and their counts."""
    seg = read_csv(segments_path, SCHEMAS["bbs_segments.csv"])
    bbs = read_csv(bbs_path, SCHEMAS["bbs.csv"])
    by_route: dict[int, list[tuple[int, float]]] = {}
    for rid, pid, w in seg:
        by_route.setdefault(int(rid), []).append((int(pid), float(w)))
    routes, counts = [], []
    for line, (rid, year, count, stops) in enumerate(bbs, start=2):
        rid = int(rid)
        if rid not in by_route:
            raise InputError(f"{Path(bbs_path).name}:{line}: route {rid} has no segments")
        if count < 0:
            raise InputError(f"{Path(bbs_path).name}:{line}: negative count")
        route = RouteDef(rid, int(year), sorted(by_route[rid]), int(stops))
        try:
            route.validate(n_pixels)
        except InputError as exc:
            raise InputError(f"{Path(bbs_path).name}:{line}: {exc}") from None
        routes.append(route)
        counts.append(int(count))
    return routes, np.asarray(counts, dtype=np.int64)


def load_inputs(directory, pixel_km: float = 20.0):
    """Read every input CSV in ``directory``.

    Returns ``(grid, routes, bbs_counts, raw)``. Years are taken from
    ``nao.csv``, which must cover every modelled year.
    """
    d = Path(directory)
    for name in ("pixels.csv", "nao.csv", "bbs.csv", "bbs_segments.csv"):
        if not (d / name).exists():
            raise InputError(f"missing input file {d / name}")
    raw = RawRecords()
    nao = read_csv(d / "nao.csv", SCHEMAS["nao.csv"])
    raw.nao = {int(y): float(v) for y, v in nao}
    if len(raw.nao) != len(nao):
        raise InputError("nao.csv: duplicate year")
    grid = load_grid(d / "pixels.csv", raw.nao.keys(), pixel_km)
    routes, counts = load_routes(d / "bbs.csv", d / "bbs_segments.csv", grid.n_pixels)
    raw.bbs = counts
    for name, attr in (("checklists.csv", "checklists"), ("occurrences.csv", "occurrences")):
        if (d / name).exists():
            setattr(raw, attr, read_csv(d / name, SCHEMAS[name]))
    if (d / "landcover.csv").exists():
        lc = read_csv(d / "landcover.csv", SCHEMAS["landcover.csv"])
        table = np.full((grid.n_pixels, 4), np.nan)
        table[lc[:, 0].astype(int)] = lc[:, 1:]
        raw.landcover = table
    raw.row_counts = {"pixels": grid.n_pixels, "routes": len(routes), "nao": len(raw.nao)}
    for attr in ("checklists", "occurrences", "landcover"):
        val = getattr(raw, attr)
        if val is not None:
            raw.row_counts[attr] = len(val)
    log.info("loaded inputs from %s: %s", d, raw.row_counts)
    return grid, routes, counts, raw


def aggregate_checklists(records, grid: PixelGrid):
    """Checklist counts and median durations per pixel-year.

    ``records`` has columns lon, lat, year, duration (minutes). Returns
    ``(n_ckl, median_duration)`` as (D, T) arrays, the latter NaN where no
    checklist was recorded.
    """
    records = np.asarray(records, dtype=float).reshape(-1, 4)
    D, T = grid.n_pixels, grid.n_years
    pix = grid.locate(records[:, 0], records[:, 1])
    yr = grid.year_index(records[:, 2])
    dur = records[:, 3]
    bad_dur = dur < 0
    outside = pix < 0
    bad_year = yr < 0
    for mask, what in ((outside, "outside the grid"), (bad_year, "with a year outside the grid"),
                       (bad_dur, "with negative duration")):
        if mask.any():
            log.warning("dropping %d checklist(s) %s", int(mask.sum()), what)
    keep = ~(outside | bad_year | bad_dur)
    cell = pix[keep] * T + yr[keep]
    n_ckl = np.bincount(cell, minlength=D * T).reshape(D, T)
    med = np.full(D * T, np.nan)
    if cell.size:
        order = np.lexsort((dur[keep], cell))
        cs, ds = cell[order], dur[keep][order]
        starts = np.flatnonzero(np.r_[True, cs[1:] != cs[:-1]])
        ends = np.r_[starts[1:], len(cs)]
        for s, e in zip(starts, ends):
            med[cs[s]] = np.median(ds[s:e])
    return n_ckl, med.reshape(D, T)


def aggregate_occurrences(records, grid: PixelGrid, n_ckl):
    """Species counts and transformed first-arrival values per pixel-year.

    ``records`` has columns lon, lat, year, day, present. ``z`` is computed
    from the earliest day with a presence, a day of 366 being clamped to 365.5.
    """
    records = np.asarray(records, dtype=float).reshape(-1, 5)
    D, T = grid.n_pixels, grid.n_years
    pix = grid.locate(records[:, 0], records[:, 1])
    yr = grid.year_index(records[:, 2])
    day = records[:, 3].copy()
    present = records[:, 4]
    bad_flag = ~np.isin(present, (0.0, 1.0))
    bad_day = ~((day > 0) & (day <= DAYS_IN_YEAR))
    cell = np.where((pix >= 0) & (yr >= 0), pix * T + yr, -1)
    no_ckl = np.zeros(len(cell), dtype=bool)
    valid_cell = cell >= 0
    no_ckl[valid_cell] = n_ckl.ravel()[cell[valid_cell]] == 0
    for mask, what in ((bad_flag, "with a presence flag outside {0, 1}"),
                       (bad_day & (present == 1), "with a day outside (0, 366]"),
                       (~valid_cell, "outside the grid or its years"),
                       (no_ckl, "in a pixel-year without checklists")):
        if mask.any():
            log.warning("rejecting %d occurrence record(s) %s", int(mask.sum()), what)
    keep = ~bad_flag & valid_cell & ~no_ckl & ~((present == 1) & bad_day)
    cell, day, present = cell[keep], day[keep], present[keep]
    n_spc = np.bincount(cell, weights=present, minlength=D * T).round().astype(np.int64)
    if np.any(n_spc > n_ckl.ravel()):
        bad = int(np.flatnonzero(n_spc > n_ckl.ravel())[0])
        raise InputError(f"pixel {bad // T}, year {grid.years[bad % T]}: more occurrences than checklists")
    last = present.astype(bool) & (day >= DAYS_IN_YEAR)
    if last.any():
        log.warning("clamping %d presence(s) on day 366 to %.1f", int(last.sum()), CLAMPED_LAST_DAY)
        day = np.where(last, CLAMPED_LAST_DAY, day)
    min_day = np.full(D * T, np.inf)
    pres = present.astype(bool)
    np.minimum.at(min_day, cell[pres], day[pres])
    z = np.full(D * T, np.nan)
    has = np.isfinite(min_day)
    z[has] = date_to_z(min_day[has])
    return n_spc.reshape(D, T), z.reshape(D, T)


def build_tables(grid: PixelGrid, routes, bbs_counts, raw: RawRecords) -> ResponseTables:
    D, T = grid.n_pixels, grid.n_years
    if raw.checklists is not None:
        n_ckl, med = aggregate_checklists(raw.checklists, grid)
    else:
        n_ckl, med = np.zeros((D, T), dtype=np.int64), np.full((D, T), np.nan)
    if raw.occurrences is not None:
        n_spc, z = aggregate_occurrences(raw.occurrences, grid, n_ckl)
    else:
        n_spc, z = np.zeros((D, T), dtype=np.int64), np.full((D, T), np.nan)
    nao = np.array([raw.nao[int(y)] for y in grid.years])
    return ResponseTables(n_ckl, med, n_spc, z, list(routes), np.asarray(bbs_counts, dtype=np.int64),
                          nao, raw.landcover).validate()


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_tables(path, grid: PixelGrid, tables: ResponseTables):
    rows = []
    for i in range(grid.n_pixels):
        for t, year in enumerate(grid.years):
            n = int(tables.n_ckl[i, t])
            rows.append((i, int(year), n, tables.median_duration[i, t],
                         int(tables.n_spc[i, t]) if n > 0 else np.nan, tables.z[i, t]))
    write_csv(path, TABLE_COLUMNS, rows)


def read_tables(path, grid: PixelGrid, routes, bbs_counts, nao, landcover=None) -> ResponseTables:
    """Inverse of :func:`write_tables`; empty cells become absent entries."""
    D, T = grid.n_pixels, grid.n_years
    n_ckl = np.zeros((D, T), dtype=np.int64)
    n_spc = np.zeros((D, T), dtype=np.int64)
    med = np.full((D, T), np.nan)
    z = np.full((D, T), np.nan)
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in TABLE_COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise InputError(f"{Path(path).name}:1: missing column(s) {', '.join(missing)}")
        for line, row in enumerate(reader, start=2):
            try:
                i = int(row["pixel_id"])
                t = int(grid.year_index([int(row["year"])])[0])
                if t < 0 or not 0 <= i < D:
                    raise InputError(f"{Path(path).name}:{line}: unknown pixel-year")
                n_ckl[i, t] = int(row["n_ckl"] or 0)
                if row["median_duration"]:
                    med[i, t] = float(row["median_duration"])
                if row["n_spc"]:
                    n_spc[i, t] = int(row["n_spc"])
                if row["z"]:
                    z[i, t] = float(row["z"])
            except ValueError as exc:
                if isinstance(exc, InputError):
                    raise
                raise InputError(f"{Path(path).name}:{line}: {exc}") from None
    return ResponseTables(n_ckl, med, n_spc, z, list(routes), np.asarray(bbs_counts, dtype=np.int64),
                          np.asarray(nao, dtype=float), landcover).validate()


def load_dataset(directory, pixel_km: float = 20.0):
    """Grid and response tables from a data directory.

    Uses a pre-aggregated ``tables.csv`` when present, otherwise aggregates
    the raw checklist and occurrence records.
    """
    grid, routes, counts, raw = load_inputs(directory, pixel_km)
    d = Path(directory)
    if (d / "tables.csv").exists() and raw.checklists is None:
        nao = np.array([raw.nao[int(y)] for y in grid.years])
        return grid, read_tables(d / "tables.csv", grid, routes, counts, nao, raw.landcover)
    return grid, build_tables(grid, routes, counts, raw)
