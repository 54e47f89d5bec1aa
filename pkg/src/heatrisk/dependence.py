"""Extremal dependence: empirical chi, Matérn variogram, Brown-Resnick fit.

All estimators work on unit-Pareto panels with missing entries.  A pair of
sites only uses days on which both are observed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import optimize, special
from scipy.stats import norm

from .errors import ConvergenceError, InsufficientDataError

logger = logging.getLogger(__name__)

MIN_OBSERVED = 10
OVERSMOOTH_NU = 10.0
VAR_FLOOR = 1e-6
MAX_BLOCKS = 2000


@dataclass(frozen=True)
class VariogramParams:
    alpha: float
    phi: float
    nu: float

    def __post_init__(self):
        if not (self.alpha >= 0 and self.phi > 0 and self.nu > 0):
            raise ValueError(f"invalid variogram parameters {self}")

    def to_dict(self):
        return {"alpha": self.alpha, "phi": self.phi, "nu": self.nu}


def matern_variogram(h, v):
    """``alpha * (1 - M(h))`` with ``M`` the Matérn correlation.

    ``M(h) = x^nu 2^(1-nu) / Gamma(nu) K_nu(x)`` with ``x = 2 sqrt(nu) h / phi``;
    evaluated in log space with the exponentially scaled Bessel function.
    """
    h = np.asarray(h, dtype=float)
    x = 2.0 * np.sqrt(v.nu) * np.abs(h) / v.phi
    pos = x > 0
    xs = np.where(pos, x, 1.0)
    with np.errstate(over="ignore", under="ignore", divide="ignore", invalid="ignore"):
        log_m = v.nu * np.log(xs) + (1.0 - v.nu) * np.log(2.0) - special.gammaln(v.nu) + np.log(special.kve(v.nu, xs)) - xs
        corr = np.exp(log_m)
    corr = np.where(np.isfinite(corr), corr, 0.0)
    corr = np.where(pos, np.clip(corr, 0.0, 1.0), 1.0)
    return v.alpha * (1.0 - corr)


def chi_brown_resnick(h, v):
    """Pairwise extremal coefficient ``2 - 2 Phi(sqrt(gamma(h)) / 2)``."""
    return 2.0 * norm.sf(np.sqrt(matern_variogram(h, v)) / 2.0)


# ---------------------------------------------------------------------------
# Risk functional


def risk_value(values, observed=None, min_observed=1):
    """Mean of the observed Pareto-scale values; NaN below ``min_observed``."""
    values = np.asarray(values, dtype=float)
    if observed is None:
        observed = np.isfinite(values)
    observed = np.asarray(observed, dtype=bool)
    n = observed.sum(axis=-1)
    total = np.where(observed, values, 0.0).sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = total / n
    return np.where(n >= min_observed, r, np.nan)


def panel_risks(std, min_observed=MIN_OBSERVED, anchor_sites=None):
    """Daily risk values of a Pareto panel.

    Days with fewer than ``min_observed`` sites, or with any of the
    ``anchor_sites`` unobserved, are excluded (NaN).
    """
    r = risk_value(std.values, std.observed, min_observed)
    if anchor_sites:
        idx = [std.site_ids.index(a) for a in anchor_sites]
        r = np.where(std.observed[:, idx].all(axis=1), r, np.nan)
    return r


class RiskThreshold(NamedTuple):
    v_r: float
    n_exceed: int
    n: int


def risk_threshold(risks, q=0.8):
    """Type-7 ``q`` quantile of the valid risks and its exceedance count."""
    r = np.asarray(risks, dtype=float)
    r = r[np.isfinite(r)]
    if len(r) == 0:
        raise InsufficientDataError("empty risk sample")
    v = float(np.quantile(r, q))
    return RiskThreshold(v, int(np.sum(r > v)), len(r))


# ---------------------------------------------------------------------------
# Empirical chi


@dataclass
class ChiCloud:
    p: float
    i: np.ndarray
    j: np.ndarray
    h: np.ndarray
    chi: np.ndarray
    n_co: np.ndarray
    var: np.ndarray
    bin_of_pair: np.ndarray
    bin_h: np.ndarray
    bin_chi: np.ndarray
    bin_lo: np.ndarray
    bin_hi: np.ndarray
    bin_sd: np.ndarray
    bin_n: np.ndarray
    boot_bin_chi: np.ndarray = field(repr=False)
    n_excluded: int = 0

    @property
    def weights(self):
        return 1.0 / self.var

    def bin_table(self):
        return {
            "h": self.bin_h,
            "chi": self.bin_chi,
            "lo": self.bin_lo,
            "hi": self.bin_hi,
            "sd": self.bin_sd,
            "n_pairs": self.bin_n,
        }


def _pair_counts(E, O):
    """Joint exceedances, marginal exceedances on co-observed days, co-observed days."""
    E = E.astype(float)
    O = O.astype(float)
    joint = E.T @ E
    marg = E.T @ O  # marg[i, j]: days i exceeds while j is observed
    co = O.T @ O
    return joint, marg, co


def _block_ids(n_t, block_length, max_blocks):
    length = max(int(block_length), int(np.ceil(n_t / max_blocks)))
    return np.arange(n_t) // length


def chi_empirical(std, p, n_bins=30, n_boot=500, xy=None, seed=0, block_length=5, max_blocks=MAX_BLOCKS, rows=None):
    """Pairwise and binned conditional exceedance estimates at level ``p``.

    Parameters
    ----------
    std : StationPanel
        Unit-Pareto panel.
    xy : ndarray
        Site coordinates in km (``n_sites x 2``).
    rows : array of bool or int, optional
        Restrict to a subset of days (used for time-split clouds).

    Notes
    -----
    A pair's estimate is joint exceedances divided by the average of the two
    marginal exceedance counts, all over co-observed days.  Bootstrap
    replicates resample temporal blocks of whole cross-sections.
    """
    if not 0.5 < p < 1:
        raise ValueError("p must lie in (0.5, 1)")
    X = std.values
    O = std.observed
    if rows is not None:
        X, O = X[rows], O[rows]
    v_p = 1.0 / (1.0 - p)
    E = O & (np.where(O, X, 0.0) > v_p)
    S = X.shape[1]
    iu, ju = np.triu_indices(S, k=1)

    joint, marg, co = _pair_counts(E, O)
    J = joint[iu, ju]
    A = 0.5 * (marg[iu, ju] + marg[ju, iu])
    keep = A > 0
    n_excluded = int((~keep).sum())
    if n_excluded:
        logger.info("%d pairs have no conditioning exceedances and are excluded", n_excluded)
    iu, ju, J, A = iu[keep], ju[keep], J[keep], A[keep]
    if len(iu) < n_bins:
        raise InsufficientDataError(f"only {len(iu)} usable pairs for {n_bins} bins")
    chi = J / A
    xy = np.asarray(xy, dtype=float)
    h = np.sqrt(((xy[iu] - xy[ju]) ** 2).sum(axis=1))

    # per-block sufficient statistics, then multinomial block counts per replicate
    blocks = _block_ids(E.shape[0], block_length, max_blocks)
    nb = blocks.max() + 1
    Jb = np.zeros((nb, len(iu)))
    Ab = np.zeros((nb, len(iu)))
    for b in range(nb):
        sel = blocks == b
        jb, mb, _ = _pair_counts(E[sel], O[sel])
        Jb[b] = jb[iu, ju]
        Ab[b] = 0.5 * (mb[iu, ju] + mb[ju, iu])
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(nb, np.full(nb, 1.0 / nb), size=n_boot).astype(float)
    Jstar = counts @ Jb
    Astar = counts @ Ab
    with np.errstate(invalid="ignore", divide="ignore"):
        chi_star = np.where(Astar > 0, Jstar / Astar, np.nan)
    var = np.nanvar(chi_star, axis=0, ddof=1) if n_boot > 1 else np.zeros(len(iu))
    var = np.where(np.isfinite(var), var, np.nanmax(var[np.isfinite(var)]) if np.isfinite(var).any() else 1.0)
    var = np.maximum(var, VAR_FLOOR)

    order = np.argsort(h, kind="stable")
    bin_of_pair = np.empty(len(h), dtype=int)
    for k, chunk in enumerate(np.array_split(order, n_bins)):
        bin_of_pair[chunk] = k
    w = 1.0 / var
    bin_n = np.bincount(bin_of_pair, minlength=n_bins)
    wsum = np.bincount(bin_of_pair, weights=w, minlength=n_bins)
    bin_h = np.bincount(bin_of_pair, weights=h, minlength=n_bins) / bin_n
    bin_chi = np.bincount(bin_of_pair, weights=w * chi, minlength=n_bins) / wsum

    # bootstrap distribution of each bin estimate (same weights, undefined pairs dropped)
    onehot = np.zeros((len(h), n_bins))
    onehot[np.arange(len(h)), bin_of_pair] = 1.0
    defined = np.isfinite(chi_star)
    num = np.where(defined, chi_star, 0.0) * w @ onehot
    den = defined * w @ onehot
    with np.errstate(invalid="ignore", divide="ignore"):
        boot_bin = num / den
    if n_boot > 1:
        bin_lo, bin_hi = np.nanpercentile(boot_bin, [2.5, 97.5], axis=0)
        bin_sd = np.nanstd(boot_bin, axis=0, ddof=1)
    else:
        bin_lo = bin_hi = bin_chi.copy()
        bin_sd = np.full(n_bins, np.nan)
    return ChiCloud(
        p=p,
        i=iu,
        j=ju,
        h=h,
        chi=chi,
        n_co=co[iu, ju].astype(int),
        var=var,
        bin_of_pair=bin_of_pair,
        bin_h=bin_h,
        bin_chi=bin_chi,
        bin_lo=bin_lo,
        bin_hi=bin_hi,
        bin_sd=bin_sd,
        bin_n=bin_n,
        boot_bin_chi=boot_bin,
        n_excluded=n_excluded,
    )


# ---------------------------------------------------------------------------
# Model fitting


@dataclass
class DependenceModel:
    vario: VariogramParams
    v_r: float
    p_fit: float
    risk_kind: str = "mean_observed"
    min_observed: int = MIN_OBSERVED
    n_exceed: int = 0
    oversmooth: bool = False
    cost: float = float("nan")
    time_varying: dict | None = None

    def __post_init__(self):
        if not self.v_r > 1:
            raise ValueError(f"risk threshold must exceed 1, got {self.v_r}")

    def alpha_at(self, m_i=None):
        """Variance parameter, optionally under the log-linear time model."""
        if self.time_varying is None or m_i is None:
            return self.vario.alpha
        return float(np.exp(self.time_varying["a0"] + self.time_varying["a1"] * m_i))

    def vario_at(self, m_i=None):
        return VariogramParams(self.alpha_at(m_i), self.vario.phi, self.vario.nu)

    def to_dict(self):
        return {
            "vario": self.vario.to_dict(),
            "v_r": self.v_r,
            "p_fit": self.p_fit,
            "risk_kind": self.risk_kind,
            "min_observed": self.min_observed,
            "n_exceed": self.n_exceed,
            "oversmooth": self.oversmooth,
            "cost": self.cost,
            "time_varying": self.time_varying,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            vario=VariogramParams(**d["vario"]),
            v_r=float(d["v_r"]),
            p_fit=float(d["p_fit"]),
            risk_kind=d.get("risk_kind", "mean_observed"),
            min_observed=int(d.get("min_observed", MIN_OBSERVED)),
            n_exceed=int(d.get("n_exceed", 0)),
            oversmooth=bool(d.get("oversmooth", False)),
            cost=float(d.get("cost", float("nan"))),
            time_varying=d.get("time_varying"),
        )


def _bin_model_chi(h, w, bins, n_bins, v):
    chi = chi_brown_resnick(h, v)
    return np.bincount(bins, weights=w * chi, minlength=n_bins) / np.bincount(bins, weights=w, minlength=n_bins)


def _bin_sd(cloud):
    sd = np.asarray(cloud.bin_sd, dtype=float)
    good = np.isfinite(sd) & (sd > 0)
    fill = np.median(sd[good]) if good.any() else 1.0
    return np.maximum(np.where(good, sd, fill), np.sqrt(VAR_FLOOR))


def _starts(h):
    hm = float(np.median(h))
    for a in (0.5, 2.0):
        for f in (0.5 * hm, 2.0 * hm):
            for n in (0.5, 1.5):
                yield np.log([a, f, n])


def fit_variogram(clouds, alpha_design=None, target=None, log_bounds=None, x0=None):
    """Weighted least squares of binned chi against the Brown-Resnick form.

    ``clouds`` is one :class:`ChiCloud` or a list.  With ``alpha_design``
    (one row per cloud) the variance is ``exp(design @ a)`` per cloud while
    range and smoothness are shared.  ``target`` may replace each cloud's
    binned chi (used by bootstrap refits); ``x0`` replaces the multistart
    grid with a single start on the log-parameter scale.

    Returns ``(params, cost, result)`` where ``params`` is a
    :class:`VariogramParams` or, for the time-varying case, a tuple
    ``(a, phi, nu)``.
    """
    single = not isinstance(clouds, (list, tuple))
    clouds = [clouds] if single else list(clouds)
    targets = target if target is not None else [c.bin_chi for c in clouds]
    sds = [_bin_sd(c) for c in clouds]
    hmax = max(float(np.max(c.h)) for c in clouds)
    hmin = min(float(np.min(c.h[c.h > 0])) for c in clouds)
    n_a = 1 if alpha_design is None else np.asarray(alpha_design).shape[1]

    def unpack(x):
        if alpha_design is None:
            alphas = [np.exp(x[0])] * len(clouds)
        else:
            alphas = np.exp(np.asarray(alpha_design) @ x[:n_a])
        return alphas, np.exp(x[n_a]), np.exp(x[n_a + 1])

    def resid(x):
        alphas, phi, nu = unpack(x)
        out = []
        for c, t, sd, a in zip(clouds, targets, sds, alphas):
            model = _bin_model_chi(c.h, c.weights, c.bin_of_pair, len(c.bin_chi), VariogramParams(a, phi, nu))
            r = (np.asarray(t) - model) / sd
            out.append(np.where(np.isfinite(r), r, 0.0))
        return np.concatenate(out)

    if log_bounds is None:
        lo = [np.log(1e-8)] + [np.log(1e-3 * hmin), np.log(0.05)]
        hi = [np.log(50.0)] + [np.log(1e3 * hmax), np.log(50.0)]
    else:
        lo, hi = log_bounds
    if alpha_design is not None:
        lo = [-30.0] * n_a + lo[1:]
        hi = [30.0] * n_a + hi[1:]
    best = None
    if x0 is not None:
        starts = [np.asarray(x0, dtype=float)]
    else:
        starts = []
        for s in _starts(np.concatenate([c.h for c in clouds])):
            starts.append(np.concatenate([[s[0]] + [0.0] * (n_a - 1), s[1:]]) if alpha_design is not None else s)
    for start in starts:
        start = np.clip(start, np.array(lo) + 1e-9, np.array(hi) - 1e-9)
        res = optimize.least_squares(resid, start, bounds=(lo, hi), x_scale=1.0, xtol=1e-10, ftol=1e-12, gtol=1e-12, max_nfev=2000)
        if best is None or res.cost < best.cost:
            best = res
    if best.status <= 0:
        raise ConvergenceError("variogram least squares did not converge", x=best.x, grad_norm=float(np.linalg.norm(best.grad)))
    alphas, phi, nu = unpack(best.x)
    if alpha_design is None:
        params = VariogramParams(float(alphas[0]), float(phi), float(nu))
    else:
        params = (best.x[:n_a].copy(), float(phi), float(nu))
    return params, float(best.cost), best


def fit_dependence(
    std,
    xy,
    p_fit=0.9,
    n_bins=30,
    n_boot=500,
    seed=0,
    block_length=5,
    min_observed=MIN_OBSERVED,
    anchor_sites=None,
    time_covariate=None,
    n_time_groups=3,
    n_boot_tv=200,
    cloud=None,
):
    """Fit the Matérn/Brown-Resnick model and the risk threshold.

    ``time_covariate`` (one value per panel row, e.g. M_I) switches on the
    log-linear variance variant, fitted to clouds computed on covariate
    groups; the bootstrap percentile interval of its slope is reported.
    """
    if cloud is None:
        cloud = chi_empirical(std, p_fit, n_bins, n_boot, xy, seed, block_length)
    vario, cost, _ = fit_variogram(cloud)
    oversmooth = vario.nu > OVERSMOOTH_NU
    if oversmooth:
        logger.warning("fitted smoothness nu=%.3g exceeds %.0f (over-smooth)", vario.nu, OVERSMOOTH_NU)
    thr = risk_threshold(panel_risks(std, min_observed, anchor_sites))
    tv = None
    if time_covariate is not None:
        tv = fit_time_varying(std, xy, np.asarray(time_covariate, dtype=float), p_fit, n_bins, n_boot_tv, seed, block_length, n_time_groups)
    return DependenceModel(
        vario=vario,
        v_r=thr.v_r,
        p_fit=p_fit,
        min_observed=min_observed,
        n_exceed=thr.n_exceed,
        oversmooth=bool(oversmooth),
        cost=cost,
        time_varying=tv,
    )


def fit_time_varying(std, xy, m_i, p_fit, n_bins, n_boot, seed, block_length, n_groups=3):
    """``alpha_t = exp(a0 + a1 * M_I(t))`` on clouds split by covariate level."""
    edges = np.quantile(m_i, np.linspace(0, 1, n_groups + 1))
    group = np.clip(np.searchsorted(edges, m_i, side="right") - 1, 0, n_groups - 1)
    clouds, means = [], []
    for g in range(n_groups):
        rows = group == g
        clouds.append(chi_empirical(std, p_fit, n_bins, n_boot, xy, seed + 1 + g, block_length, rows=rows))
        means.append(float(m_i[rows].mean()))
    design = np.column_stack([np.ones(n_groups), means])
    (a, phi, nu), cost, res = fit_variogram(clouds, alpha_design=design)
    a1_boot = []
    for b in range(n_boot):
        targets = [c.boot_bin_chi[b] for c in clouds]
        try:
            (ab, _, _), _, _ = fit_variogram(clouds, alpha_design=design, target=targets, x0=res.x)
            a1_boot.append(ab[1])
        except ConvergenceError:
            continue
    lo, hi = (np.percentile(a1_boot, [2.5, 97.5]) if a1_boot else (np.nan, np.nan))
    return {
        "a0": float(a[0]),
        "a1": float(a[1]),
        "phi": phi,
        "nu": nu,
        "a1_ci": [float(lo), float(hi)],
        "a1_significant": bool(np.isfinite(lo) and (lo > 0 or hi < 0)),
        "group_means": means,
        "cost": cost,
    }
