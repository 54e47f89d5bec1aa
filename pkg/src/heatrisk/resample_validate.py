"""Block bootstrap, bias correction, cross-validation folds and scores."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

from .datastore import SUMMER_DAYS
from .errors import ConvergenceError, InsufficientDataError

logger = logging.getLogger(__name__)

N_FOLDS = 90
ST_CLUSTERS = 30
ST_GROUPS = 3
FILL_TRIES = 20


# ---------------------------------------------------------------------------
# Block bootstrap


@dataclass
class BootstrapPlan:
    block_length: int = 5
    n_replicates: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.block_length < 1:
            raise ValueError("block_length must be >= 1")
        if self.block_length > SUMMER_DAYS:
            raise ValueError(f"block_length {self.block_length} exceeds the {SUMMER_DAYS}-day summer")


@dataclass
class BootstrapReplicate:
    panel: object
    n_filled_other: int = 0
    n_filled_uniform: int = 0


def _summer_cube(panel):
    """Dense ``year x day x site`` cube with NaN where nothing was observed."""
    years = np.unique(panel.year)
    yi = np.searchsorted(years, panel.year)
    cube = np.full((len(years), SUMMER_DAYS, panel.n_sites), np.nan)
    cube[yi, panel.day] = np.where(panel.observed, panel.values, np.nan)
    return years, yi, cube


def block_bootstrap(std_uniform, plan, replicate_ids=None):
    """Yield replicate panels built from temporal blocks of whole cross-sections.

    For every summer of the source, consecutive windows of ``block_length``
    days are filled from randomly chosen windows (any summer, any start).
    The source mask is imposed on each replicate; an entry observed in the
    source but missing in its drawn block takes the value at the same offset
    of up to 20 further random blocks, then an independent uniform draw.
    """
    if std_uniform.scale != "uniform":
        raise ValueError("block bootstrap expects a panel on the uniform scale")
    years, yi, cube = _summer_cube(std_uniform)
    ny = len(years)
    Lb = plan.block_length
    starts = np.arange(0, SUMMER_DAYS, Lb)
    rows, cols = np.nonzero(std_uniform.observed)
    ids = range(plan.n_replicates) if replicate_ids is None else replicate_ids
    for rep in ids:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(plan.seed, spawn_key=(int(rep),))))
        out = np.full_like(cube, np.nan)
        for y in range(ny):
            for s0 in starts:
                n = min(Lb, SUMMER_DAYS - s0)
                sy = rng.integers(ny)
                sd = rng.integers(0, SUMMER_DAYS - n + 1)
                out[y, s0 : s0 + n] = cube[sy, sd : sd + n]
        vals = out[yi[rows], std_uniform.day[rows], cols]
        gap = ~np.isfinite(vals)
        n_other = 0
        if gap.any():
            gi = np.flatnonzero(gap)
            offs = std_uniform.day[rows[gi]] % Lb
            for _ in range(FILL_TRIES):
                if len(gi) == 0:
                    break
                sy = rng.integers(ny, size=len(gi))
                sd = rng.integers(0, SUMMER_DAYS - Lb + 1, size=len(gi)) + offs
                cand = cube[sy, np.minimum(sd, SUMMER_DAYS - 1), cols[gi]]
                ok = np.isfinite(cand)
                vals[gi[ok]] = cand[ok]
                n_other += int(ok.sum())
                gi = gi[~ok]
                offs = offs[~ok]
            n_unif = len(gi)
            if n_unif:
                vals[gi] = rng.uniform(size=n_unif)
        else:
            n_unif = 0
        values = np.full(std_uniform.values.shape, np.nan)
        values[rows, cols] = vals
        yield BootstrapReplicate(std_uniform.with_values(values, "uniform"), n_other, n_unif)


# ---------------------------------------------------------------------------
# Bias correction


@dataclass
class BiasCorrection:
    fits: list
    shift: float
    n_dropped: int = 0
    dropped: list = field(default_factory=list)


def bias_correct(boot_fits, full_fit, refit, min_replicates=100):
    """Shift replicate shapes to centre on the full-data shape, then refit scales.

    ``refit(i, xi)`` re-maximises replicate ``i``'s likelihood over the scale
    coefficients with the shape fixed at ``xi`` and returns a fit.
    Replicates whose refit fails are dropped and counted.
    """
    if len(boot_fits) < min_replicates:
        raise InsufficientDataError(f"bias correction needs >= {min_replicates} replicates, got {len(boot_fits)}")
    xis = np.array([f.xi_o for f in boot_fits])
    shift = float(full_fit.xi_o - xis.mean())
    out, dropped = [], []
    for i, f in enumerate(boot_fits):
        try:
            out.append(refit(i, f.xi_o + shift))
        except (ConvergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
            logger.warning("bias-correction refit %d dropped: %s", i, exc)
            dropped.append(i)
    return BiasCorrection(out, shift, len(dropped), dropped)


# ---------------------------------------------------------------------------
# Folds


@dataclass
class FoldSpec:
    kind: str
    assignments: np.ndarray
    n_folds: int = N_FOLDS

    def masks(self):
        for k in range(self.n_folds):
            held = self.assignments == k
            if held.any():
                yield k, held


def make_folds(panel, kind, xy=None, seed=0, n_clusters=ST_CLUSTERS):
    """Fold id per observed entry (``-1`` where unobserved).

    ``K90``: a random permutation of observed entries dealt into 90 folds.
    ``ST``: k-means clusters of site coordinates crossed with
    ``(day_of_summer // 7) % 3``; fold ``= cluster * 3 + group``.
    """
    kind = kind.upper()
    assign = np.full(panel.values.shape, -1, dtype=int)
    rows, cols = np.nonzero(panel.observed)
    rng = np.random.default_rng(seed)
    if kind in ("K90", "90"):
        perm = rng.permutation(len(rows))
        fold = np.empty(len(rows), dtype=int)
        fold[perm] = np.arange(len(rows)) % N_FOLDS
        assign[rows, cols] = fold
        return FoldSpec("K90", assign)
    if kind == "ST":
        if panel.n_sites < n_clusters:
            raise InsufficientDataError(f"ST folds need >= {n_clusters} sites, got {panel.n_sites}")
        xy = np.asarray(xy, dtype=float)
        _, labels = kmeans2(xy, n_clusters, minit="++", seed=rng)
        used = np.unique(labels)
        if len(used) < n_clusters:
            logger.warning("k-means left %d empty clusters", n_clusters - len(used))
        group = (panel.day // 7) % ST_GROUPS
        fold = labels[cols] * ST_GROUPS + group[rows]
        empty = sorted(set(range(n_clusters * ST_GROUPS)) - set(np.unique(fold).tolist()))
        if empty:
            logger.info("ST folds with no entries: %s", empty)
        assign[rows, cols] = fold
        return FoldSpec("ST", assign, n_clusters * ST_GROUPS)
    raise ValueError(f"unknown fold kind {kind!r}")


# ---------------------------------------------------------------------------
# Scores

CRPS_LEVELS = np.concatenate([np.arange(0.001, 0.9995, 0.002), 1.0 - 10.0 ** -np.linspace(3.2, 7.0, 20)])


def crps_piecewise(x_grid, p_grid, obs):
    """CRPS of a piecewise-linear predictive CDF through ``(x_grid, p_grid)``.

    ``x_grid`` is ``n x K`` (one row per observation, non-decreasing).  The
    CDF is taken as 0 below the first knot and 1 above the last; the
    observation is inserted as a breakpoint and each piece is integrated by
    the trapezoid rule.
    """
    X = np.atleast_2d(np.asarray(x_grid, dtype=float))
    P = np.broadcast_to(np.asarray(p_grid, dtype=float), X.shape)
    y = np.asarray(obs, dtype=float).reshape(-1)
    dx = np.diff(X, axis=1)
    p0, p1 = P[:, :-1], P[:, 1:]
    x0, x1 = X[:, :-1], X[:, 1:]
    low = 0.5 * dx * (p0**2 + p1**2)
    high = 0.5 * dx * ((1 - p0) ** 2 + (1 - p1) ** 2)
    below = x1 <= y[:, None]
    above = x0 >= y[:, None]
    split = ~below & ~above
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(dx > 0, (y[:, None] - x0) / dx, 0.0)
    pm = p0 + frac * (p1 - p0)
    split_val = 0.5 * (y[:, None] - x0) * (p0**2 + pm**2) + 0.5 * (x1 - y[:, None]) * ((1 - pm) ** 2 + (1 - p1) ** 2)
    total = np.where(below, low, 0.0) + np.where(above, high, 0.0) + np.where(split, split_val, 0.0)
    out = total.sum(axis=1)
    # mass outside the knots
    out += np.maximum(X[:, 0] - y, 0.0) + np.maximum(y - X[:, -1], 0.0)
    return out


def crps_model(margins, points, obs, levels=CRPS_LEVELS):
    """CRPS of the composite marginal model at each held-out observation."""
    levels = np.sort(np.asarray(levels, dtype=float))
    n = len(points)
    Q = np.empty((n, len(levels)))
    for k, p in enumerate(levels):
        Q[:, k] = margins.ppf(np.full(n, p), points)
    Q = np.maximum.accumulate(Q, axis=1)
    return crps_piecewise(Q, levels, obs)


def site_year_quantiles(panel, taus, min_obs=10):
    """Type-7 quantiles per (site, year); NaN for site-years with fewer than ``min_obs`` values."""
    years = np.unique(panel.year)
    out = np.full((len(years), panel.n_sites, len(taus)), np.nan)
    for a, yr in enumerate(years):
        sel = panel.year == yr
        vals = np.where(panel.observed[sel], panel.values[sel], np.nan)
        enough = np.isfinite(vals).sum(axis=0) >= min_obs
        if enough.any():
            out[a, enough] = np.nanquantile(vals[:, enough], taus, axis=0, method="linear").T
    return years, out


@dataclass
class Scores:
    rmse: float
    crps: float
    n_quantile: int
    n_crps: int
    per_fold: list = field(default_factory=list)


def score(held_points, held_values, held_rows, held_cols, panel_years, emp, emp_years, margins, taus, crps_mask=None):
    """RMSE of empirical vs predicted quantiles and mean CRPS for one fold.

    ``emp`` holds site-year empirical quantiles (from :func:`site_year_quantiles`);
    ``crps_mask`` restricts CRPS to a subset of held-out entries (e.g. those
    above the threshold for tail models).
    """
    taus = np.asarray(taus, dtype=float)
    ya = np.searchsorted(emp_years, panel_years[held_rows])
    e = emp[ya, held_cols]  # n x len(taus)
    ok = np.isfinite(e).all(axis=1)
    sq = []
    if ok.any():
        pts = held_points.take(np.flatnonzero(ok))
        pred = np.column_stack([margins.ppf(np.full(len(pts), t), pts) for t in taus])
        sq = ((e[ok] - pred) ** 2).ravel()
    sel = np.ones(len(held_values), dtype=bool) if crps_mask is None else np.asarray(crps_mask, dtype=bool)
    cr = crps_model(margins, held_points.take(np.flatnonzero(sel)), held_values[sel]) if sel.any() else np.array([])
    return np.asarray(sq), cr


def cross_validate(panel, folds, fit, points_for, taus, crps_filter=None, min_obs=10, max_folds=None):
    """Refit without each fold and score it.

    Parameters
    ----------
    fit : callable
        ``fit(train_mask) -> MarginalModel``.
    points_for : callable
        ``points_for(rows, cols) -> Points`` for held-out entries.
    crps_filter : callable, optional
        ``crps_filter(margins, points, values) -> bool mask`` selecting which
        held-out entries enter the CRPS.

    Per-fold RMSE and CRPS are averaged across folds.
    """
    emp_years, emp = site_year_quantiles(panel, taus, min_obs)
    per_fold = []
    n_q = n_c = 0
    for count, (k, held) in enumerate(folds.masks()):
        if max_folds is not None and count >= max_folds:
            break
        train = panel.observed & ~held
        margins = fit(train)
        rows, cols = np.nonzero(held)
        pts = points_for(rows, cols)
        vals = panel.values[rows, cols]
        mask = None if crps_filter is None else crps_filter(margins, pts, vals)
        sq, cr = score(pts, vals, rows, cols, panel.year, emp, emp_years, margins, taus, mask)
        rm = float(np.sqrt(sq.mean())) if len(sq) else np.nan
        cm = float(cr.mean()) if len(cr) else np.nan
        per_fold.append({"fold": int(k), "rmse": rm, "crps": cm, "n_quantile": int(len(sq)), "n_crps": int(len(cr))})
        n_q += len(sq)
        n_c += len(cr)
    rm = np.array([f["rmse"] for f in per_fold])
    cm = np.array([f["crps"] for f in per_fold])
    return Scores(
        rmse=float(np.nanmean(rm)) if np.isfinite(rm).any() else np.nan,
        crps=float(np.nanmean(cm)) if np.isfinite(cm).any() else np.nan,
        n_quantile=n_q,
        n_crps=n_c,
        per_fold=per_fold,
    )
