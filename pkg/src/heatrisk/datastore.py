"""Station panels, climate grids and covariate series.

Everything downstream works on dense ``time x site`` matrices with an explicit
boolean ``observed`` mask.  Ingestion is CSV only; a long-format file has the
columns ``site_id, lon, lat, coast_dist, year, day, value`` where ``day`` is
the day of the year (1-based) and a blank ``value`` marks a missing reading.
"""

from __future__ import annotations

import calendar
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from .errors import ConflictError, ParseError, SchemaError

logger = logging.getLogger(__name__)

PANEL_COLUMNS = ["site_id", "lon", "lat", "coast_dist", "year", "day", "value"]
SUMMER_DAYS = 92
EARTH_RADIUS_KM = 6371.0


@dataclass(frozen=True)
class SiteMeta:
    site_id: str
    lon: float
    lat: float
    coast_dist: float
    kind: str = "station"

    def __post_init__(self):
        if not self.coast_dist > 0:
            raise SchemaError(f"site {self.site_id}: coast_dist must be > 0, got {self.coast_dist}")
        if self.kind not in ("station", "grid"):
            raise SchemaError(f"site {self.site_id}: unknown kind {self.kind!r}")


class DayIndex(NamedTuple):
    """A summer day: ``day`` counts from 1 June (0) to 31 August (91)."""

    year: int
    day: int


def june_first(year):
    """Day-of-year (1-based) of 1 June."""
    return 152 + int(calendar.isleap(int(year)))


@dataclass
class StationPanel:
    """Daily values on a ``time x site`` grid with a missingness mask.

    ``day`` holds the day of summer unless ``calendar`` is True, in which case
    it is the raw day of year and :func:`summer_filter` has not run yet.
    ``scale`` tags the units of ``values`` ("data", "pareto" or "uniform").
    """

    sites: list
    year: np.ndarray
    day: np.ndarray
    values: np.ndarray
    observed: np.ndarray
    calendar: bool = False
    scale: str = "data"

    def __post_init__(self):
        self.year = np.asarray(self.year, dtype=int)
        self.day = np.asarray(self.day, dtype=int)
        self.values = np.array(self.values, dtype=float)
        self.observed = np.asarray(self.observed, dtype=bool)
        n_t, n_s = len(self.year), len(self.sites)
        if self.values.shape != (n_t, n_s) or self.observed.shape != (n_t, n_s):
            raise SchemaError(
                f"values/observed must have shape {(n_t, n_s)}, got "
                f"{self.values.shape} and {self.observed.shape}"
            )
        if len(self.day) != n_t:
            raise SchemaError("year and day must have the same length")
        bad = self.observed & ~np.isfinite(self.values)
        if bad.any():
            raise SchemaError(f"{int(bad.sum())} observed entries are not finite")
        self.values[~self.observed] = np.nan

    @property
    def n_times(self):
        return len(self.year)

    @property
    def n_sites(self):
        return len(self.sites)

    @property
    def times(self):
        return [DayIndex(int(y), int(d)) for y, d in zip(self.year, self.day)]

    @property
    def site_ids(self):
        return [s.site_id for s in self.sites]

    @property
    def lonlat(self):
        return np.array([[s.lon, s.lat] for s in self.sites], dtype=float).reshape(-1, 2)

    @property
    def coast_dist(self):
        return np.array([s.coast_dist for s in self.sites], dtype=float)

    def take_sites(self, idx):
        idx = np.asarray(idx, dtype=int)
        return replace(
            self,
            sites=[self.sites[i] for i in idx],
            values=self.values[:, idx],
            observed=self.observed[:, idx],
        )

    def take_times(self, rows):
        rows = np.asarray(rows)
        return replace(
            self,
            year=self.year[rows],
            day=self.day[rows],
            values=self.values[rows],
            observed=self.observed[rows],
        )

    def with_values(self, values, scale):
        """Same layout and mask, new values on another scale."""
        values = np.array(values, dtype=float)
        values[~self.observed] = np.nan
        return replace(self, values=values, scale=scale)


class ClimateGrid(StationPanel):
    """A complete panel on a regular lattice (no missing entries)."""

    def __post_init__(self):
        super().__post_init__()
        if not self.observed.all():
            raise SchemaError(f"climate grid has {int((~self.observed).sum())} missing values")
        check_lattice(self.lonlat)


# Standardised panels share the layout; only the scale tag differs.
StdPanel = StationPanel


def check_lattice(lonlat, rtol=1e-3):
    """Raise unless every coordinate offset is a multiple of the lattice step."""
    for axis, name in ((0, "lon"), (1, "lat")):
        u = np.unique(np.round(lonlat[:, axis], 9))
        if len(u) < 2:
            continue
        steps = np.diff(u)
        step = steps.min()
        ratio = (u - u[0]) / step
        if np.max(np.abs(ratio - np.round(ratio))) > rtol * max(1.0, ratio.max()):
            raise SchemaError(f"grid {name} coordinates are not on a regular lattice")


@dataclass
class CovariateSeries:
    """Time covariates keyed by (year, day of summer).

    ``day`` may be None for annual covariates, which then apply to every
    day of that year.
    """

    year: np.ndarray
    day: np.ndarray | None
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        self.year = np.asarray(self.year, dtype=int)
        if self.day is not None:
            self.day = np.asarray(self.day, dtype=int)
        self.values = {k: np.asarray(v, dtype=float) for k, v in self.values.items()}
        for k, v in self.values.items():
            if v.shape != self.year.shape:
                raise SchemaError(f"covariate {k} has shape {v.shape}, expected {self.year.shape}")
            if not np.all(np.isfinite(v)):
                raise SchemaError(f"covariate {k} has non-finite entries")

    @property
    def names(self):
        return list(self.values)

    def align(self, year, day):
        """Covariate values for each (year, day); every time must be covered."""
        year = np.asarray(year, dtype=int)
        day = np.asarray(day, dtype=int)
        if self.day is None:
            keys = pd.Index(self.year)
            pos = keys.get_indexer(year)
        else:
            keys = pd.MultiIndex.from_arrays([self.year, self.day])
            pos = keys.get_indexer(pd.MultiIndex.from_arrays([year, day]))
        if (pos < 0).any():
            miss = int(np.argmax(pos < 0))
            raise SchemaError(f"no covariates for year={year[miss]} day={day[miss]}")
        return {k: v[pos] for k, v in self.values.items()}

    def at_year(self, year):
        """Summer-mean covariates for one year (used for 'year conditions')."""
        sel = self.year == int(year)
        if not sel.any():
            raise SchemaError(f"no covariates for year {year}")
        return {k: float(v[sel].mean()) for k, v in self.values.items()}


# ---------------------------------------------------------------------------
# CSV ingestion


def _numeric(frame, col, blank_ok=False, integer=False):
    raw = frame[col].str.strip()
    out = pd.to_numeric(raw, errors="coerce")
    bad = out.isna() & ~(blank_ok & (raw == ""))
    if integer:
        bad |= out.notna() & (out != np.round(out))
    if bad.any():
        i = int(np.argmax(bad.to_numpy()))
        raise ParseError(f"bad {col} value {frame[col].iloc[i]!r}", line=i + 2)
    return out.to_numpy(dtype=float)


def load_panel(path, schema="station", bbox=None):
    """Read a long-format CSV into a :class:`StationPanel` or :class:`ClimateGrid`.

    Parameters
    ----------
    path : path-like
        CSV with header ``site_id, lon, lat, coast_dist, year, day, value``.
    schema : {"station", "grid"}
        Grid files must be complete; a blank value is a schema error.
    bbox : tuple, optional
        ``(lon0, lat0, lon1, lat1)``; sites outside are dropped.
    """
    if schema not in ("station", "grid"):
        raise ValueError(f"unknown schema {schema!r}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    missing_cols = [c for c in PANEL_COLUMNS if c not in frame.columns]
    if missing_cols:
        raise ParseError(f"missing columns {missing_cols}", line=1)
    if frame.empty:
        raise ParseError("no data rows", line=2)

    ids = frame["site_id"].str.strip()
    if (ids == "").any():
        raise ParseError("blank site_id", line=int(np.argmax((ids == "").to_numpy())) + 2)
    lon = _numeric(frame, "lon")
    lat = _numeric(frame, "lat")
    coast = _numeric(frame, "coast_dist")
    year = _numeric(frame, "year", integer=True).astype(int)
    doy = _numeric(frame, "day", integer=True).astype(int)
    value = _numeric(frame, "value", blank_ok=True)
    bad_day = (doy < 1) | (doy > 366)
    if bad_day.any():
        raise ParseError(f"day {doy[bad_day][0]} outside 1..366", line=int(np.argmax(bad_day)) + 2)

    keyed = pd.DataFrame({"site_id": ids, "year": year, "day": doy})
    dup = keyed.duplicated(keep=False).to_numpy()
    if dup.any():
        lines = (np.flatnonzero(dup)[:2] + 2).tolist()
        raise ConflictError(f"duplicate (site, year, day) rows at lines {lines}")

    kind = "grid" if schema == "grid" else "station"
    meta = pd.DataFrame({"site_id": ids, "lon": lon, "lat": lat, "coast": coast})
    first = meta.drop_duplicates("site_id")
    distinct = meta.drop_duplicates()
    if len(distinct) != len(first):
        clash = distinct["site_id"][distinct["site_id"].duplicated()].iloc[0]
        raise ConflictError(f"site {clash} has inconsistent metadata")
    first = first.sort_values("site_id", kind="stable")
    sites = [
        SiteMeta(r.site_id, float(r.lon), float(r.lat), float(r.coast), kind)
        for r in first.itertuples(index=False)
    ]
    site_pos = pd.Index(first["site_id"]).get_indexer(ids)

    times = pd.DataFrame({"year": year, "day": doy}).drop_duplicates()
    times = times.sort_values(["year", "day"], kind="stable")
    time_pos = pd.MultiIndex.from_frame(times).get_indexer(pd.MultiIndex.from_arrays([year, doy]))

    n_t, n_s = len(times), len(sites)
    values = np.full((n_t, n_s), np.nan)
    observed = np.zeros((n_t, n_s), dtype=bool)
    present = np.zeros((n_t, n_s), dtype=bool)
    values[time_pos, site_pos] = value
    observed[time_pos, site_pos] = np.isfinite(value)
    present[time_pos, site_pos] = True

    cls = StationPanel
    if schema == "grid":
        if not np.isfinite(value).all():
            i = int(np.argmax(~np.isfinite(value)))
            raise SchemaError(f"grid value missing at line {i + 2}")
        if not present.all():
            raise SchemaError(f"grid is incomplete: {int((~present).sum())} (site, day) entries absent")
        cls = ClimateGrid
    panel = cls(
        sites=sites,
        year=times["year"].to_numpy(),
        day=times["day"].to_numpy(),
        values=values,
        observed=observed,
        calendar=True,
    )
    if bbox is not None:
        panel = crop(panel, bbox)
    return panel


def save_panel(panel, path, float_format="%.17g"):
    """Write a panel back to the long CSV format (dense: one row per entry)."""
    doy = panel.day if panel.calendar else panel.day + np.array([june_first(y) for y in panel.year])
    n_t, n_s = panel.values.shape
    ti, si = np.meshgrid(np.arange(n_t), np.arange(n_s), indexing="ij")
    ti, si = ti.ravel(), si.ravel()
    vals = panel.values[ti, si]
    frame = pd.DataFrame(
        {
            "site_id": [panel.sites[j].site_id for j in si],
            "lon": [panel.sites[j].lon for j in si],
            "lat": [panel.sites[j].lat for j in si],
            "coast_dist": [panel.sites[j].coast_dist for j in si],
            "year": panel.year[ti],
            "day": doy[ti],
            "value": vals,
        }
    )
    frame.to_csv(path, index=False, float_format=float_format, na_rep="")


def save_panel_dir(panel, directory, float_format="%.17g"):
    """Persist as ``meta.csv``, ``values.csv`` and ``mask.csv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = pd.DataFrame(
        {
            "site_id": panel.site_ids,
            "lon": [s.lon for s in panel.sites],
            "lat": [s.lat for s in panel.sites],
            "coast_dist": [s.coast_dist for s in panel.sites],
            "kind": [s.kind for s in panel.sites],
            "scale": panel.scale,
            "calendar": int(panel.calendar),
        }
    )
    meta.to_csv(d / "meta.csv", index=False, float_format=float_format)
    head = pd.DataFrame({"year": panel.year, "day": panel.day})
    vals = pd.concat([head, pd.DataFrame(panel.values, columns=panel.site_ids)], axis=1)
    vals.to_csv(d / "values.csv", index=False, float_format=float_format, na_rep="")
    mask = pd.concat([head, pd.DataFrame(panel.observed.astype(int), columns=panel.site_ids)], axis=1)
    mask.to_csv(d / "mask.csv", index=False)


def load_panel_dir(directory):
    d = Path(directory)
    meta = pd.read_csv(d / "meta.csv", dtype={"site_id": str}, float_precision="round_trip")
    vals = pd.read_csv(d / "values.csv", float_precision="round_trip")
    mask = pd.read_csv(d / "mask.csv")
    ids = meta["site_id"].tolist()
    sites = [
        SiteMeta(r.site_id, float(r.lon), float(r.lat), float(r.coast_dist), r.kind)
        for r in meta.itertuples(index=False)
    ]
    observed = mask[ids].to_numpy().astype(bool)
    values = vals[ids].to_numpy(dtype=float)
    kinds = set(meta["kind"])
    cls = ClimateGrid if kinds == {"grid"} and observed.all() else StationPanel
    return cls(
        sites=sites,
        year=vals["year"].to_numpy(),
        day=vals["day"].to_numpy(),
        values=values,
        observed=observed,
        calendar=bool(meta["calendar"].iloc[0]) if len(meta) else False,
        scale=str(meta["scale"].iloc[0]) if len(meta) else "data",
    )


def load_covariates(path):
    """Covariate CSV: ``year[, day], M_I, M_G, CO2`` (any extra columns kept).

    ``day`` is the day of year, as in panel files, and is converted to the
    day of summer.
    """
    frame = pd.read_csv(path, float_precision="round_trip")
    if "year" not in frame.columns:
        raise ParseError("covariate file needs a 'year' column", line=1)
    day = None
    if "day" in frame.columns:
        doy = frame["day"].to_numpy(dtype=int)
        day = doy - np.array([june_first(y) for y in frame["year"]])
    names = [c for c in frame.columns if c not in ("year", "day")]
    return CovariateSeries(
        year=frame["year"].to_numpy(dtype=int),
        day=day,
        values={c: frame[c].to_numpy(dtype=float) for c in names},
    )


def save_covariates(covs, path, float_format="%.17g"):
    cols = {"year": covs.year}
    if covs.day is not None:
        cols["day"] = covs.day + np.array([june_first(y) for y in covs.year])
    cols.update(covs.values)
    pd.DataFrame(cols).to_csv(path, index=False, float_format=float_format)


# ---------------------------------------------------------------------------
# Transformations


def summer_filter(panel):
    """Keep June-August, index days from 1 June, drop rows nobody observed."""
    if panel.calendar:
        offset = np.array([june_first(y) for y in panel.year])
        dos = panel.day - offset
        keep = (dos >= 0) & (dos < SUMMER_DAYS)
        panel = replace(panel.take_times(keep), day=dos[keep], calendar=False)
    rows = panel.observed.any(axis=1)
    if not rows.all():
        logger.info("dropping %d time rows with no observed site", int((~rows).sum()))
        panel = panel.take_times(rows)
    return panel


def crop(panel, bbox):
    lon0, lat0, lon1, lat1 = bbox
    ll = panel.lonlat
    keep = (ll[:, 0] >= lon0) & (ll[:, 0] <= lon1) & (ll[:, 1] >= lat0) & (ll[:, 1] <= lat1)
    return panel.take_sites(np.flatnonzero(keep))


def parse_bbox(text):
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 4:
        raise ValueError("bbox needs lon0,lat0,lon1,lat1")
    return tuple(parts)


def empirical_quantiles(grid, taus):
    """Per-site linear-interpolation (type-7) sample quantiles.

    Returns an array of shape ``(n_sites, len(taus))``.
    """
    taus = np.asarray(taus, dtype=float)
    if taus.ndim != 1 or len(taus) == 0:
        raise ValueError("taus must be a non-empty 1-d sequence")
    if taus.min() < 0.01 - 1e-12 or taus.max() > 0.99 + 1e-12:
        raise ValueError("taus must lie in [0.01, 0.99]")
    if np.any(np.diff(taus) <= 0):
        raise ValueError("taus must be strictly increasing")
    values = np.where(grid.observed, grid.values, np.nan)
    if values.shape[0] == 0 or (~np.isfinite(values)).all(axis=0).any():
        raise ValueError("empty series at one or more sites")
    return np.nanquantile(values, taus, axis=0, method="linear").T


# ---------------------------------------------------------------------------
# Geometry


@dataclass(frozen=True)
class Projection:
    """Local equirectangular projection to kilometres about an origin."""

    lon0: float
    lat0: float

    @classmethod
    def about(cls, *site_lists):
        ll = np.vstack([np.array([[s.lon, s.lat] for s in sites]).reshape(-1, 2) for sites in site_lists])
        return cls(float(ll[:, 0].mean()), float(ll[:, 1].mean()))

    def __call__(self, lonlat):
        lonlat = np.asarray(lonlat, dtype=float).reshape(-1, 2)
        k = np.pi / 180.0 * EARTH_RADIUS_KM
        x = (lonlat[:, 0] - self.lon0) * k * np.cos(np.radians(self.lat0))
        y = (lonlat[:, 1] - self.lat0) * k
        return np.column_stack([x, y])


def distance_matrix(xy):
    xy = np.asarray(xy, dtype=float)
    diff = xy[:, None, :] - xy[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def nearest_sites(from_xy, to_xy):
    """Index into ``to_xy`` of the nearest point for every row of ``from_xy``."""
    _, idx = cKDTree(to_xy).query(from_xy)
    return np.asarray(idx, dtype=int)
