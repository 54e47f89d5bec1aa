"""Covariate bookkeeping for vectorised model evaluation.

Marginal models are evaluated at many (time, site) points at once.  A
:class:`Points` bundle carries, for each point, the site-level quantities
borrowed from the climate grid (quantile table, threshold covariate, GPD
scale, coast distance) together with the time covariates of its day.
Design matrices are assembled from term names such as ``"const"``,
``"q_c"``, ``"ln_sigma_c"`` or ``"ln_C:M_I"``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaError


@dataclass
class SiteTable:
    """Per-site covariates, typically looked up from the nearest grid cell."""

    site_ids: list
    taus: np.ndarray
    qc: np.ndarray
    u_c: np.ndarray
    coast: np.ndarray
    sigma_c: np.ndarray | None = None

    def __post_init__(self):
        self.taus = np.asarray(self.taus, dtype=float)
        self.qc = np.asarray(self.qc, dtype=float).reshape(len(self.site_ids), len(self.taus))
        self.u_c = np.asarray(self.u_c, dtype=float)
        self.coast = np.asarray(self.coast, dtype=float)
        if self.sigma_c is not None:
            self.sigma_c = np.asarray(self.sigma_c, dtype=float)

    def __len__(self):
        return len(self.site_ids)

    def take(self, idx, site_ids=None):
        idx = np.asarray(idx, dtype=int)
        return SiteTable(
            site_ids=list(site_ids) if site_ids is not None else [self.site_ids[i] for i in idx],
            taus=self.taus,
            qc=self.qc[idx],
            u_c=self.u_c[idx],
            coast=self.coast[idx],
            sigma_c=None if self.sigma_c is None else self.sigma_c[idx],
        )

    def with_sigma(self, sigma_c):
        return SiteTable(self.site_ids, self.taus, self.qc, self.u_c, self.coast, np.asarray(sigma_c, dtype=float))


def map_sites(grid_table, nearest, site_ids, coast):
    """Station site table: grid quantities from the nearest cell, own coast distance."""
    nearest = np.asarray(nearest, dtype=int)
    return SiteTable(
        site_ids=list(site_ids),
        taus=grid_table.taus,
        qc=grid_table.qc[nearest],
        u_c=grid_table.u_c[nearest],
        coast=np.asarray(coast, dtype=float),
        sigma_c=None if grid_table.sigma_c is None else grid_table.sigma_c[nearest],
    )


@dataclass
class Points:
    """A batch of (time, site) evaluation points."""

    site: np.ndarray
    table: SiteTable
    z: dict = field(default_factory=dict)

    def __post_init__(self):
        self.site = np.asarray(self.site, dtype=int)
        self.z = {k: np.broadcast_to(np.asarray(v, dtype=float), self.site.shape) for k, v in self.z.items()}

    def __len__(self):
        return len(self.site)

    @property
    def qc(self):
        return self.table.qc[self.site]

    @property
    def u_c(self):
        return self.table.u_c[self.site]

    @property
    def coast(self):
        return self.table.coast[self.site]

    @property
    def sigma_c(self):
        if self.table.sigma_c is None:
            raise SchemaError("sigma_c is not available; fit the climate-grid GPD first")
        return self.table.sigma_c[self.site]

    def take(self, idx):
        idx = np.asarray(idx)
        return Points(self.site[idx], self.table, {k: v[idx] for k, v in self.z.items()})


def site_points(table, z=None, sites=None):
    """One point per site (all sites by default) under fixed time covariates."""
    sites = np.arange(len(table)) if sites is None else np.asarray(sites, dtype=int)
    return Points(sites, table, dict(z or {}))


def panel_points(panel, table, covs=None, observed_only=True):
    """Points for panel entries, with time covariates aligned to each row.

    Returns ``(points, y, rows, cols)`` where ``rows``/``cols`` index the
    panel and ``y`` holds the matching values.
    """
    if observed_only:
        rows, cols = np.nonzero(panel.observed)
    else:
        rows, cols = np.indices(panel.values.shape).reshape(2, -1)
    z = {}
    if covs is not None:
        aligned = covs.align(panel.year, panel.day)
        z = {k: v[rows] for k, v in aligned.items()}
    return Points(cols, table, z), panel.values[rows, cols], rows, cols


def _tau_column(table, tau):
    hit = np.flatnonzero(np.isclose(table.taus, tau, rtol=0, atol=1e-9))
    if len(hit) == 0:
        raise SchemaError(f"no climate quantile at tau={tau}")
    return int(hit[0])


def term_values(points, name, tau=None):
    """Values of one design term at every point."""
    if ":" in name:
        out = np.ones(len(points))
        for part in name.split(":"):
            out = out * term_values(points, part, tau)
        return out
    if name == "const":
        return np.ones(len(points))
    if name == "q_c":
        if tau is None:
            raise ValueError("term q_c needs a tau")
        return points.qc[:, _tau_column(points.table, tau)]
    if name == "u_c":
        return points.u_c
    if name == "sigma_c":
        return points.sigma_c
    if name == "ln_sigma_c":
        return np.log(points.sigma_c)
    if name == "C":
        return points.coast
    if name == "ln_C":
        return np.log(points.coast)
    if name in points.z:
        return points.z[name]
    raise SchemaError(f"unknown covariate term {name!r}")


def design(points, terms, tau=None):
    return np.column_stack([term_values(points, t, tau) for t in terms]) if terms else np.empty((len(points), 0))


def time_terms(terms):
    """Names of the time covariates a term list depends on."""
    known = {"const", "q_c", "u_c", "sigma_c", "ln_sigma_c", "C", "ln_C"}
    out = []
    for t in terms:
        for part in t.split(":"):
            if part not in known and part not in out:
                out.append(part)
    return out
