"""Quantile-regression body model.

Each level ``tau`` of a coarse grid gets its own asymmetric-Laplace (check
loss) regression.  For any (time, site) the fitted quantiles are joined by a
shape-preserving cubic in ``tau``, which gives a continuous, strictly
increasing quantile function and hence a distribution function for the body.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .covariates import design
from .errors import ConvergenceError, CrossingError, InsufficientDataError
from .optimize import simplex_multistart

logger = logging.getLogger(__name__)

DEFAULT_TAUS = tuple([0.01] + [round(0.05 * k, 2) for k in range(1, 20)] + [0.99])

MODEL_ROWS = {
    "base": ["const"],
    "clim": ["const", "q_c"],
    "clim+mi": ["const", "q_c", "M_I"],
}

MIN_OBS = 50
PILOT_SIZE = 5000


def check_loss(z, tau):
    """Check function ``(tau - 1{z < 0}) * z``."""
    z = np.asarray(z, dtype=float)
    return (tau - (z < 0)) * z


@dataclass(frozen=True)
class AldFit:
    tau: float
    betas: np.ndarray
    log_psi: float
    covariate_spec: tuple
    n_obs: int = 0
    loglik: float = float("nan")

    def predict(self, points):
        return design(points, self.covariate_spec, self.tau) @ np.asarray(self.betas)

    def to_dict(self):
        return {
            "tau": self.tau,
            "betas": [float(b) for b in self.betas],
            "log_psi": self.log_psi,
            "covariate_spec": list(self.covariate_spec),
            "n_obs": self.n_obs,
            "loglik": self.loglik,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            tau=float(d["tau"]),
            betas=np.asarray(d["betas"], dtype=float),
            log_psi=float(d["log_psi"]),
            covariate_spec=tuple(d["covariate_spec"]),
            n_obs=int(d.get("n_obs", 0)),
            loglik=float(d.get("loglik", float("nan"))),
        )


def fit_ald_matrix(y, X, tau, terms=None, n_starts=3, seed=0):
    """Minimise the mean check loss of ``y - X @ beta``.

    Columns other than the intercept are standardised before a multi-start
    Nelder-Mead search.  The first start is least squares with the intercept
    moved to the ``tau`` quantile of the residuals.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if n < MIN_OBS:
        raise InsufficientDataError(f"ALD fit at tau={tau} needs >= {MIN_OBS} observations, got {n}")
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")

    const = np.all(X == X[:1], axis=0) & (X[0] != 0)
    mu = np.where(const, 0.0, X.mean(axis=0))
    sd = np.where(const, X[0], X.std(axis=0))
    sd = np.where(sd > 0, sd, 1.0)
    Z = (X - mu) / sd

    gamma0, *_ = np.linalg.lstsq(Z, y, rcond=None)
    resid = y - Z @ gamma0
    icol = np.flatnonzero(const)
    if len(icol):
        gamma0[icol[0]] += np.quantile(resid, tau)
    scale = max(np.std(resid), 1e-8)

    def objective(g):
        return float(np.mean(check_loss(y - Z @ g, tau)))

    rng = np.random.default_rng(seed)
    starts = [gamma0] + [gamma0 + 0.25 * scale * rng.standard_normal(p) for _ in range(n_starts - 1)]
    step = 0.5 * scale
    if n > PILOT_SIZE:
        # multistart on a subsample, then polish on the full data
        sub = rng.choice(n, PILOT_SIZE, replace=False)
        ys, Zs = y[sub], Z[sub]
        pilot = simplex_multistart(
            lambda g: float(np.mean(check_loss(ys - Zs @ g, tau))), starts, scale=step, xatol=1e-6 * scale, fatol=1e-10 * scale
        )
        starts, step = [pilot.x], 0.05 * scale
    res = simplex_multistart(objective, starts, scale=step, xatol=1e-9 * scale, fatol=1e-13 * scale)

    r = y - Z @ res.x
    subgrad = Z.T @ ((r < 0).astype(float) - tau) / n
    gnorm = float(np.linalg.norm(subgrad))
    if not res.success:
        raise ConvergenceError(f"ALD fit at tau={tau} did not converge: {res.message}", x=res.x, grad_norm=gnorm)

    # back to the original column scale
    beta = res.x / sd
    if len(icol):
        beta[icol[0]] -= np.sum(np.delete(res.x * mu / sd, icol[0]))
    psi = float(np.mean(check_loss(y - X @ beta, tau)))
    psi = max(psi, 1e-300)
    loglik = n * (np.log(tau * (1 - tau)) - np.log(psi) - 1.0)
    return AldFit(
        tau=float(tau),
        betas=beta,
        log_psi=float(np.log(psi)),
        covariate_spec=tuple(terms) if terms is not None else tuple(f"x{j}" for j in range(p)),
        n_obs=n,
        loglik=float(loglik),
    )


def fit_ald(y, points, tau, terms, **kw):
    """ALD regression of observed values on the design implied by ``terms``."""
    y = np.asarray(y, dtype=float)
    X = design(points, terms, tau)
    ok = np.isfinite(y)
    if not np.all(np.isfinite(X[ok])):
        raise InsufficientDataError("covariates missing at some observed entries")
    return fit_ald_matrix(y[ok], X[ok], tau, terms, **kw)


# ---------------------------------------------------------------------------
# Monotone cubic in tau


def _edge_slope(h0, h1, m0, m1):
    d = ((2 * h0 + h1) * m0 - h0 * m1) / (h0 + h1)
    d = np.where(np.sign(d) != np.sign(m0), 0.0, d)
    flip = (np.sign(m0) != np.sign(m1)) & (np.abs(d) > 3 * np.abs(m0))
    return np.where(flip, 3 * m0, d)


def pchip_slopes(x, Y):
    """Fritsch-Butland knot derivatives for each row of ``Y`` over knots ``x``."""
    x = np.asarray(x, dtype=float)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    h = np.diff(x)
    delta = np.diff(Y, axis=1) / h
    K = len(x)
    if K == 2:
        return np.repeat(delta, 2, axis=1)
    d = np.empty_like(Y)
    w1 = 2 * h[1:] + h[:-1]
    w2 = h[1:] + 2 * h[:-1]
    dl, dr = delta[:, :-1], delta[:, 1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        hm = (w1 + w2) / (w1 / dl + w2 / dr)
    d[:, 1:-1] = np.where(dl * dr > 0, hm, 0.0)
    d[:, 0] = _edge_slope(h[0], h[1], delta[:, 0], delta[:, 1])
    d[:, -1] = _edge_slope(h[-1], h[-2], delta[:, -1], delta[:, -2])
    return d


def _hermite(x, Y, D, t):
    """Evaluate the cubic Hermite interpolant row-wise at ``t`` (one per row)."""
    k = np.clip(np.searchsorted(x, t, side="right") - 1, 0, len(x) - 2)
    h = x[k + 1] - x[k]
    s = (t - x[k]) / h
    rows = np.arange(Y.shape[0])
    y0, y1 = Y[rows, k], Y[rows, k + 1]
    d0, d1 = D[rows, k], D[rows, k + 1]
    s2, s3 = s * s, s * s * s
    return (2 * s3 - 3 * s2 + 1) * y0 + (s3 - 2 * s2 + s) * h * d0 + (-2 * s3 + 3 * s2) * y1 + (s3 - s2) * h * d1


def monotone_rows(Q, eps=1e-9):
    """Sort each row and nudge ties apart so rows strictly increase."""
    Q = np.sort(Q, axis=1)
    gaps = np.diff(Q, axis=1)
    if np.all(gaps > 0):
        return Q
    ramp = np.cumsum(np.concatenate([np.zeros((Q.shape[0], 1)), np.where(gaps > 0, 0.0, eps)], axis=1), axis=1)
    return Q + ramp


class QuantileCurves:
    """Per-row monotone quantile functions over a fixed tau grid.

    Outside the grid the quantile function continues linearly with the
    secant slope of the outermost interval, so the distribution function is
    defined (and strictly increasing) on the whole real line until it is
    clipped to [0, 1].
    """

    def __init__(self, taus, Q):
        self.taus = np.asarray(taus, dtype=float)
        self.Q = np.atleast_2d(np.asarray(Q, dtype=float))
        self.D = pchip_slopes(self.taus, self.Q)
        self.lo_slope = (self.Q[:, 1] - self.Q[:, 0]) / (self.taus[1] - self.taus[0])
        self.hi_slope = (self.Q[:, -1] - self.Q[:, -2]) / (self.taus[-1] - self.taus[-2])

    def ppf(self, p):
        p = np.broadcast_to(np.asarray(p, dtype=float), (self.Q.shape[0],))
        t0, t1 = self.taus[0], self.taus[-1]
        inside = _hermite(self.taus, self.Q, self.D, np.clip(p, t0, t1))
        below = self.Q[:, 0] + self.lo_slope * (p - t0)
        above = self.Q[:, -1] + self.hi_slope * (p - t1)
        return np.where(p < t0, below, np.where(p > t1, above, inside))

    def cdf(self, x, tol=1e-11):
        x = np.broadcast_to(np.asarray(x, dtype=float), (self.Q.shape[0],))
        t0, t1 = self.taus[0], self.taus[-1]
        lo = np.full(x.shape, t0)
        hi = np.full(x.shape, t1)
        n_iter = int(np.ceil(np.log2((t1 - t0) / tol)))
        for _ in range(n_iter):
            mid = 0.5 * (lo + hi)
            go_up = _hermite(self.taus, self.Q, self.D, mid) < x
            lo = np.where(go_up, mid, lo)
            hi = np.where(go_up, hi, mid)
        inside = 0.5 * (lo + hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            below = t0 + (x - self.Q[:, 0]) / self.lo_slope
            above = t1 + (x - self.Q[:, -1]) / self.hi_slope
        out = np.where(x < self.Q[:, 0], below, np.where(x > self.Q[:, -1], above, inside))
        return np.clip(out, 0.0, 1.0)


@dataclass
class BodyModel:
    """Per-tau ALD fits joined into a distribution function."""

    tau_grid: np.ndarray
    fits: list
    covariate_spec: tuple = field(default=())

    def __post_init__(self):
        self.tau_grid = np.asarray(self.tau_grid, dtype=float)
        if not self.covariate_spec and self.fits:
            self.covariate_spec = tuple(self.fits[0].covariate_spec)

    def quantile_table(self, points, rearrange=True):
        """Fitted grid quantiles, shape ``(len(points), len(tau_grid))``."""
        Q = np.column_stack([f.predict(points) for f in self.fits])
        if rearrange:
            Q = monotone_rows(Q)
        return Q

    def curves(self, points):
        return QuantileCurves(self.tau_grid, self.quantile_table(points))

    def cdf(self, x, points):
        return self.curves(points).cdf(x)

    def ppf(self, p, points):
        return self.curves(points).ppf(p)

    def to_dict(self):
        return {
            "tau_grid": [float(t) for t in self.tau_grid],
            "covariate_spec": list(self.covariate_spec),
            "fits": [f.to_dict() for f in self.fits],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            tau_grid=np.asarray(d["tau_grid"], dtype=float),
            fits=[AldFit.from_dict(f) for f in d["fits"]],
            covariate_spec=tuple(d["covariate_spec"]),
        )


def build_body(fits, points=None, labels=None):
    """Assemble a :class:`BodyModel`; ``points`` are checked for crossing.

    ``labels`` optionally gives a ``(t, s)`` description per point for the
    error message.
    """
    fits = sorted(fits, key=lambda f: f.tau)
    taus = np.array([f.tau for f in fits])
    if len(taus) < 2 or np.any(np.diff(taus) <= 0):
        raise ValueError("fits must cover at least two distinct tau levels")
    body = BodyModel(taus, fits)
    if points is not None and len(points):
        Q = body.quantile_table(points, rearrange=False)
        bad = np.diff(Q, axis=1) <= 0
        if bad.any():
            i, k = np.argwhere(bad)[0]
            where = labels[i] if labels is not None else f"point {i} (site index {points.site[i]})"
            raise CrossingError(
                f"quantiles cross at {where} between tau={taus[k]} and tau={taus[k + 1]}",
                t=where,
                s=int(points.site[i]),
                tau=float(taus[k + 1]),
            )
    return body


def fit_body(y, points, taus=DEFAULT_TAUS, terms=("const",), check_points=None, labels=None, **kw):
    """Independent ALD fits for every tau, then :func:`build_body`.

    Crossing is checked on ``check_points`` (the training points by default).
    """
    fits = []
    for tau in taus:
        fits.append(fit_ald(y, points, float(tau), list(terms), **kw))
        logger.debug("tau=%.2f betas=%s", tau, fits[-1].betas)
    chk = points if check_points is None else check_points
    return build_body(fits, chk, labels)
