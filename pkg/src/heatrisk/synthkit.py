"""Synthetic datasets with known truth for recovery and pipeline tests.

Daily fields are generated on the uniform scale from r-Pareto replicates with
a Brown-Resnick profile (rank-transformed per site) and mapped through a
known marginal model

    X(s, t) = a + b * m_c(s) + beta * M_I(t) + kappa_o(s) * eps,

where ``eps`` is standard normal below its 0.9 quantile and has a GPD tail
above it.  The climate grid uses ``m_c(s) + kappa_c(s) * eps`` with an
independent field.  The station GPD scale is therefore
``kappa_o(s) * sigma_eps`` and the grid one ``kappa_c(s) * sigma_eps``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import norm, rankdata

from .covariates import Points, SiteTable
from .datastore import (
    SUMMER_DAYS,
    ClimateGrid,
    CovariateSeries,
    Projection,
    SiteMeta,
    StationPanel,
    june_first,
    save_covariates,
)
from .dependence import VariogramParams
from .simulator import simulate_profiles
from .tail_model import XI_BOUNDS, gpd_cdf, gpd_ppf

logger = logging.getLogger(__name__)

EPS_SPLIT = 0.9
Z_SPLIT = float(norm.ppf(EPS_SPLIT))


@dataclass
class SynthSpec:
    n_sites: int = 40
    bbox: tuple = (-10.0, 51.5, -6.0, 55.3)
    grid_shape: tuple = (8, 8)
    year0: int = 1990
    n_years: int = 20
    # marginal truth
    a: float = 0.0
    b: float = 1.0
    beta_mi: float = 1.0
    kappa_o: float = 2.0
    kappa_c: float = 1.6
    kappa_grad: float = 0.1
    mc_mean: float = 19.0
    mc_grad: tuple = (0.8, -0.6)
    sigma_eps: float = 0.55
    xi: float = -0.15
    # covariates
    mi_trend: float = 0.02
    mi_sd: float = 0.1
    # dependence truth
    alpha: float = 1.5
    phi: float = 200.0
    nu: float = 1.0
    # missingness
    missing_rate: float = 0.1
    coastal_bias: bool = False
    seed: int = 0

    def __post_init__(self):
        self.bbox = tuple(float(v) for v in self.bbox)
        self.grid_shape = tuple(int(v) for v in self.grid_shape)
        self.mc_grad = tuple(float(v) for v in self.mc_grad)
        lo, hi = XI_BOUNDS
        if not lo < self.xi < hi:
            raise ValueError(f"xi must lie in {XI_BOUNDS}")
        if not 0 <= self.missing_rate < 1:
            raise ValueError("missing_rate must be in [0, 1)")
        if min(self.kappa_o, self.kappa_c, self.sigma_eps, self.alpha, self.phi, self.nu) <= 0:
            raise ValueError("scale and dependence parameters must be positive")
        if self.n_sites < 1 or self.n_years < 1:
            raise ValueError("need at least one site and one year")

    @property
    def vario(self):
        return VariogramParams(self.alpha, self.phi, self.nu)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# Noise law and samplers


def eps_cdf(z, sigma, xi):
    z = np.asarray(z, dtype=float)
    upper = 1.0 - (1.0 - EPS_SPLIT) * (1.0 - gpd_cdf(np.maximum(z - Z_SPLIT, 0.0), sigma, xi))
    return np.where(z <= Z_SPLIT, norm.cdf(z), upper)


def eps_ppf(p, sigma, xi):
    p = np.asarray(p, dtype=float)
    q = np.clip((p - EPS_SPLIT) / (1.0 - EPS_SPLIT), 0.0, 1.0)
    return np.where(p <= EPS_SPLIT, norm.ppf(np.minimum(p, EPS_SPLIT)), Z_SPLIT + gpd_ppf(q, sigma, xi))


def sample_gpd(n, sigma, xi, rng):
    """GPD draws by inversion."""
    return gpd_ppf(rng.random(n), sigma, xi)


def clim_excesses(sigma, xi, n_per_site, rng):
    """Per-site GPD excess samples with a shared shape."""
    return [sample_gpd(n_per_site, s, xi, rng) for s in np.asarray(sigma, dtype=float)]


def covariate_gpd_sample(n, theta, xi, rng, n_sites=50):
    """Excesses with ``log sigma = theta0 + theta1 ln sigma_c(s) + theta2 M_I``.

    Returns ``(y, points)``; points carry ``sigma_c``, coast distance and a
    per-excess ``M_I`` drawn uniformly on [-0.5, 1].
    """
    sigma_c = np.exp(rng.uniform(np.log(0.8), np.log(3.0), n_sites))
    coast = rng.uniform(1.0, 120.0, n_sites)
    table = SiteTable(
        site_ids=[f"s{k}" for k in range(n_sites)],
        taus=[0.9],
        qc=np.zeros((n_sites, 1)),
        u_c=np.zeros(n_sites),
        coast=coast,
        sigma_c=sigma_c,
    )
    site = rng.integers(0, n_sites, n)
    mi = rng.uniform(-0.5, 1.0, n)
    pts = Points(site, table, {"M_I": mi})
    log_sigma = theta[0] + theta[1] * np.log(sigma_c[site]) + theta[2] * mi
    return gpd_ppf(rng.random(n), np.exp(log_sigma), xi), pts


# ---------------------------------------------------------------------------
# Layout


def coast_distance(lonlat, bbox, proj):
    """Distance to the nearest bounding-box edge plus 1 km (keeps it positive)."""
    lo = proj(np.array([[bbox[0], bbox[1]]]))[0]
    hi = proj(np.array([[bbox[2], bbox[3]]]))[0]
    xy = proj(lonlat)
    d = np.minimum.reduce([xy[:, 0] - lo[0], hi[0] - xy[:, 0], xy[:, 1] - lo[1], hi[1] - xy[:, 1]])
    return np.maximum(d, 0.0) + 1.0


def _layout(spec, rng):
    lon0, lat0, lon1, lat1 = spec.bbox
    proj = Projection(0.5 * (lon0 + lon1), 0.5 * (lat0 + lat1))
    st_ll = np.round(np.column_stack([rng.uniform(lon0, lon1, spec.n_sites), rng.uniform(lat0, lat1, spec.n_sites)]), 5)
    nx, ny = spec.grid_shape
    gx, gy = np.meshgrid(np.linspace(lon0, lon1, nx), np.linspace(lat0, lat1, ny), indexing="ij")
    gr_ll = np.round(np.column_stack([gx.ravel(), gy.ravel()]), 9)
    return proj, st_ll, gr_ll


@dataclass
class SynthTruth:
    spec: SynthSpec
    m_c_station: np.ndarray
    kappa_o: np.ndarray
    m_c_grid: np.ndarray
    kappa_c: np.ndarray
    mi: dict = field(default_factory=dict)

    def station_cdf(self, x, site, mi):
        """True distribution function of a station value."""
        s = self.spec
        loc = s.a + s.b * self.m_c_station[site] + s.beta_mi * mi
        return eps_cdf((np.asarray(x) - loc) / self.kappa_o[site], s.sigma_eps, s.xi)

    def station_sigma(self):
        return self.kappa_o * self.spec.sigma_eps

    def grid_sigma(self):
        return self.kappa_c * self.spec.sigma_eps

    def to_dict(self):
        return {
            "spec": self.spec.to_dict(),
            "station": {"m_c": self.m_c_station.tolist(), "kappa_o": self.kappa_o.tolist(), "sigma_o": self.station_sigma().tolist()},
            "grid": {"m_c": self.m_c_grid.tolist(), "kappa_c": self.kappa_c.tolist(), "sigma_c": self.grid_sigma().tolist()},
            "xi": self.spec.xi,
            "vario": self.spec.vario.to_dict(),
            "M_I": {str(k): v for k, v in self.mi.items()},
        }


@dataclass
class SynthData:
    station: StationPanel
    grid: ClimateGrid
    covariates: CovariateSeries
    truth: SynthTruth


def dependent_uniforms(vario, xy, n, seed):
    """``n`` fields of dependent uniforms from r-Pareto replicates.

    Per site, a fresh sorted iid uniform sample is placed in the rank order
    of the replicates, so each site's values are an exact iid uniform sample
    while the joint ranks follow the Brown-Resnick profile.
    """
    batch = simulate_profiles(vario, xy, n, L=1, seed=seed)
    X = batch.risks[:, None] * batch.profiles
    ranks = rankdata(X, axis=0, method="ordinal").astype(int) - 1
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    draws = np.sort(rng.random(X.shape), axis=0)
    return np.take_along_axis(draws, ranks, axis=0)


def inject_missing(observed_shape, rate, coast=None, coastal_bias=False, rng=None):
    """Bernoulli mask; with ``coastal_bias`` sites near the coast lose more data."""
    rng = rng or np.random.default_rng()
    n_t, n_s = observed_shape
    p = np.full(n_s, float(rate))
    if coastal_bias and coast is not None and rate > 0:
        w = np.exp(-np.asarray(coast, dtype=float) / 50.0)
        p = np.clip(rate * w / w.mean(), 0.0, 0.95)
    return rng.random((n_t, n_s)) >= p[None, :]


def generate(spec):
    """Station panel, climate grid, covariates and truth for a :class:`SynthSpec`."""
    root = np.random.SeedSequence(spec.seed)
    s_layout, s_cov, s_miss = (np.random.default_rng(k) for k in root.spawn(3))
    proj, st_ll, gr_ll = _layout(spec, s_layout)
    st_xy, gr_xy = proj(st_ll), proj(gr_ll)

    def mc(xy):
        return spec.mc_mean + spec.mc_grad[0] * xy[:, 0] / 100.0 + spec.mc_grad[1] * xy[:, 1] / 100.0

    def kappa(xy, k0):
        return k0 * np.exp(spec.kappa_grad * xy[:, 0] / 100.0)

    years = np.arange(spec.year0, spec.year0 + spec.n_years)
    mi = spec.mi_trend * (years - spec.year0) + s_cov.normal(0.0, spec.mi_sd, len(years))
    mg = 0.8 * mi + s_cov.normal(0.0, 0.05, len(years))
    co2 = 340.0 + 2.0 * (years - spec.year0)
    covs = CovariateSeries(years, None, {"M_I": mi, "M_G": mg, "CO2": co2})

    year = np.repeat(years, SUMMER_DAYS)
    day = np.tile(np.arange(SUMMER_DAYS), len(years))
    n_t = len(year)
    mi_t = np.repeat(mi, SUMMER_DAYS)

    seeds = root.generate_state(2)
    U_st = dependent_uniforms(spec.vario, st_xy, n_t, int(seeds[0]))
    U_gr = dependent_uniforms(spec.vario, gr_xy, n_t, int(seeds[1]))

    mc_st, mc_gr = mc(st_xy), mc(gr_xy)
    ko, kc = kappa(st_xy, spec.kappa_o), kappa(gr_xy, spec.kappa_c)
    X_st = spec.a + spec.b * mc_st[None, :] + spec.beta_mi * mi_t[:, None] + ko[None, :] * eps_ppf(U_st, spec.sigma_eps, spec.xi)
    X_gr = mc_gr[None, :] + kc[None, :] * eps_ppf(U_gr, spec.sigma_eps, spec.xi)

    coast_st = coast_distance(st_ll, spec.bbox, proj)
    coast_gr = coast_distance(gr_ll, spec.bbox, proj)
    observed = inject_missing(X_st.shape, spec.missing_rate, coast_st, spec.coastal_bias, s_miss)

    st_sites = [SiteMeta(f"S{k:03d}", float(a), float(b), float(c)) for k, ((a, b), c) in enumerate(zip(st_ll, coast_st))]
    gr_sites = [SiteMeta(f"G{k:03d}", float(a), float(b), float(c), "grid") for k, ((a, b), c) in enumerate(zip(gr_ll, coast_gr))]
    station = StationPanel(st_sites, year, day, X_st, observed)
    grid = ClimateGrid(gr_sites, year, day, X_gr, np.ones_like(X_gr, dtype=bool))
    truth = SynthTruth(spec, mc_st, ko, mc_gr, kc, {int(y): float(v) for y, v in zip(years, mi)})
    return SynthData(station, grid, covs, truth)


# ---------------------------------------------------------------------------
# Persistence in the ingest CSV format


def _long_frame(panel):
    rows, cols = np.nonzero(panel.observed)
    doy = panel.day[rows] + np.array([june_first(y) for y in panel.year[rows]])
    return pd.DataFrame(
        {
            "site_id": [panel.sites[c].site_id for c in cols],
            "lon": [panel.sites[c].lon for c in cols],
            "lat": [panel.sites[c].lat for c in cols],
            "coast_dist": [panel.sites[c].coast_dist for c in cols],
            "year": panel.year[rows],
            "day": doy,
            "value": panel.values[rows, cols],
        }
    )


def write(data, directory, float_format="%.9g"):
    """Write ``station.csv``, ``grid.csv``, ``covariates.csv`` and ``truth.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _long_frame(data.station).to_csv(d / "station.csv", index=False, float_format=float_format)
    _long_frame(data.grid).to_csv(d / "grid.csv", index=False, float_format=float_format)
    save_covariates(data.covariates, d / "covariates.csv", float_format=float_format)
    (d / "truth.json").write_text(json.dumps(data.truth.to_dict(), indent=2, sort_keys=True))
    return d


def load_truth(directory):
    return json.loads((Path(directory) / "truth.json").read_text())


def load_spec(path):
    return SynthSpec.from_dict(json.loads(Path(path).read_text()))


__all__ = [
    "SynthSpec",
    "SynthTruth",
    "SynthData",
    "generate",
    "write",
    "load_truth",
    "load_spec",
    "sample_gpd",
    "clim_excesses",
    "covariate_gpd_sample",
    "dependent_uniforms",
    "inject_missing",
    "eps_cdf",
    "eps_ppf",
    "coast_distance",
]
