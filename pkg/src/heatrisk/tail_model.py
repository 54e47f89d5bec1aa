"""Threshold, exceedance rate and generalised Pareto tail models.

The climate grid gets a GPD with a free scale per site and one shared shape,
fitted by alternating one-dimensional searches.  Station excesses get a GPD
whose log-scale is linear in the climate scale and time covariates (models
M0, M1, M2), fitted by a bounded search over the shape with Newton steps for
the regression coefficients at each candidate shape.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .body_model import AldFit, fit_ald
from .covariates import design
from .errors import CollinearityError, ConvergenceError, InsufficientDataError
from .optimize import bounded_scalar, golden_section

logger = logging.getLogger(__name__)

XI_BOUNDS = (-0.9, 0.9)
XI_ZERO = 1e-10
LAMBDA_BOUNDS = (1e-6, 0.5)
COND_LIMIT = 1e8

OBS_MODELS = {
    "M0": ["const", "ln_sigma_c"],
    "M1": ["const", "ln_sigma_c", "M_I"],
    "M2": ["const", "sigma_c", "ln_C", "M_I", "ln_C:M_I"],
}


def obs_terms(model_id, clim_scale_link="identity"):
    """Design terms for ``log sigma_o`` under one of the M0-M2 forms."""
    if model_id not in OBS_MODELS:
        raise ValueError(f"unknown tail model {model_id!r}")
    terms = list(OBS_MODELS[model_id])
    if model_id == "M2":
        if clim_scale_link not in ("identity", "log"):
            raise ValueError("clim_scale_link must be 'identity' or 'log'")
        if clim_scale_link == "log":
            terms[1] = "ln_sigma_c"
    return terms


# ---------------------------------------------------------------------------
# GPD primitives


@dataclass(frozen=True)
class GpdParams:
    sigma: float
    xi: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def endpoint(self):
        return self.sigma / -self.xi if self.xi < 0 else np.inf


def gpd_cdf(y, sigma, xi):
    """``1 - (1 + xi*y/sigma)_+^(-1/xi)`` for excesses ``y >= 0``."""
    y, sigma, xi = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (y, sigma, xi)))
    z = np.maximum(y, 0.0) / sigma
    small = np.abs(xi) < XI_ZERO
    xs = np.where(small, 1.0, xi)
    base = 1.0 + xs * z
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        surv = np.where(base > 0, np.exp(-np.log1p(np.where(base > 0, xs * z, 0.0)) / xs), 0.0)
    surv = np.where(small, np.exp(-z), surv)
    out = 1.0 - surv
    return out if out.ndim else float(out)


def gpd_ppf(p, sigma, xi):
    """GPD quantile for probabilities in [0, 1)."""
    p, sigma, xi = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (p, sigma, xi)))
    small = np.abs(xi) < XI_ZERO
    xs = np.where(small, 1.0, xi)
    lq = -np.log1p(-p)
    out = np.where(small, sigma * lq, sigma * np.expm1(xs * lq) / xs)
    return out if out.ndim else float(out)


def gpd_logpdf(y, sigma, xi):
    """Log density; ``-inf`` outside the support."""
    y, sigma, xi = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (y, sigma, xi)))
    z = y / sigma
    small = np.abs(xi) < XI_ZERO
    xs = np.where(small, 1.0, xi)
    base = 1.0 + xs * z
    ok = (base > 0) & (y >= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        lp = -np.log(sigma) - (1.0 + 1.0 / xs) * np.log1p(np.where(ok, xs * z, 0.0))
    lp = np.where(small, -np.log(sigma) - z, lp)
    return np.where(ok, lp, -np.inf)


def _site_loglik(Y, mask, sigma, xi):
    """Summed GPD log-likelihood per row of a zero-padded excess matrix.

    Padding zeros contribute nothing to either sum, so ``mask`` is only
    needed for the per-row counts.
    """
    n = mask.sum(axis=1)
    z = Y / sigma[:, None]
    if abs(xi) < XI_ZERO:
        return -n * np.log(sigma) - z.sum(axis=1)
    arg = xi * z
    feasible = arg.min(axis=1) > -1.0
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.log1p(np.maximum(arg, -1.0 + 1e-300)).sum(axis=1)
    return np.where(feasible, -n * np.log(sigma) - (1.0 + 1.0 / xi) * s, -np.inf)


# ---------------------------------------------------------------------------
# Threshold and exceedance rate


@dataclass
class ThresholdField:
    """Constant-in-time threshold ``u(s) = beta0 + beta1 * u_c(s)``."""

    fit: AldFit

    @property
    def coefficients(self):
        return np.asarray(self.fit.betas, dtype=float)

    def u(self, points):
        return design(points, ["const", "u_c"]) @ self.coefficients

    def to_dict(self):
        return self.fit.to_dict()

    @classmethod
    def from_dict(cls, d):
        return cls(AldFit.from_dict(d))


def fit_threshold(y, points, tau=0.9, **kw):
    """ALD regression at ``tau`` of station values on the grid ``u_c``."""
    return ThresholdField(fit_ald(y, points, tau, ["const", "u_c"], **kw))


def exceedance_rate(body, threshold, points, record=None):
    """``lambda = 1 - F_body(u)``, clamped to ``LAMBDA_BOUNDS``.

    Clamped points are counted in ``record["lambda_clamped"]`` when a dict
    is supplied.
    """
    lam = 1.0 - body.cdf(threshold.u(points), points)
    lo, hi = LAMBDA_BOUNDS
    clamped = (lam < lo) | (lam > hi)
    if clamped.any():
        logger.warning("exceedance rate clamped at %d of %d points", int(clamped.sum()), len(lam))
        if record is not None:
            record["lambda_clamped"] = record.get("lambda_clamped", 0) + int(clamped.sum())
    return np.clip(lam, lo, hi)


# ---------------------------------------------------------------------------
# Climate-grid GPD: per-site scale, shared shape


@dataclass
class ClimTailFit:
    sigma_c: np.ndarray
    xi_c: float
    loglik: float
    sweeps: int
    converged: bool
    trace: list = field(default_factory=list)

    def to_dict(self):
        return {
            "sigma_c": [float(s) for s in self.sigma_c],
            "xi_c": self.xi_c,
            "loglik": self.loglik,
            "sweeps": self.sweeps,
            "converged": self.converged,
            "trace": [[float(a), float(b)] for a, b in self.trace],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            sigma_c=np.asarray(d["sigma_c"], dtype=float),
            xi_c=float(d["xi_c"]),
            loglik=float(d["loglik"]),
            sweeps=int(d["sweeps"]),
            converged=bool(d["converged"]),
            trace=[tuple(t) for t in d.get("trace", [])],
        )


def _pad(excesses):
    n = max(len(e) for e in excesses)
    Y = np.zeros((len(excesses), n))
    mask = np.zeros((len(excesses), n), dtype=bool)
    for i, e in enumerate(excesses):
        Y[i, : len(e)] = e
        mask[i, : len(e)] = True
    return Y, mask


def _sigma_step(Y, mask, xi, eta_center, width=3.0, tol=1e-11):
    """Per-site maximisation over log sigma with the shape held fixed."""
    ymax = np.where(mask, Y, 0.0).max(axis=1)
    floor = np.log(-xi * ymax) + 1e-12 if xi < 0 else np.full(len(ymax), -np.inf)

    def negll(eta):
        return -_site_loglik(Y, mask, np.exp(eta), xi)

    lo = np.maximum(eta_center - width, floor)
    hi = np.maximum(eta_center + width, floor + 1.0)
    for _ in range(10):
        eta = golden_section(negll, lo, hi, tol=tol)
        # move the bracket if an optimum sits on an edge that is not the support limit
        at_hi = hi - eta < 1e-6 * (hi - lo)
        at_lo = (eta - lo < 1e-6 * (hi - lo)) & (lo > floor + 1e-9)
        if not (at_hi.any() or at_lo.any()):
            break
        span = hi - lo
        lo = np.where(at_hi, hi - 0.1 * span, np.where(at_lo, np.maximum(lo - 2 * span, floor), lo))
        hi = np.where(at_hi, hi + 2 * span, np.where(at_lo, lo + 0.1 * span + 2 * span, hi))
    return eta


def _sigma_newton(Y, mask, xi, eta0, tol=1e-12, max_iter=60):
    """Per-site Newton ascent in log sigma (concave for xi > -1)."""
    n = mask.sum(axis=1)
    ymax = np.where(mask, Y, 0.0).max(axis=1)
    eta = np.array(eta0, dtype=float)
    if xi < 0:
        eta = np.maximum(eta, np.log(-xi * ymax) + 1e-3)
    ll = _site_loglik(Y, mask, np.exp(eta), xi)
    for _ in range(max_iter):
        w = np.where(mask, Y, 0.0) * np.exp(-eta)[:, None]
        den = 1.0 + xi * w
        g = -n + np.where(mask, (1.0 + xi) * w / den, 0.0).sum(axis=1)
        h = np.where(mask, (1.0 + xi) * w / den**2, 0.0).sum(axis=1)
        step = g / np.maximum(h, 1e-300)
        t = np.ones_like(eta)
        active = np.abs(step) > tol
        if not active.any():
            break
        for _ in range(40):
            cand = eta + t * step
            cll = _site_loglik(Y, mask, np.exp(cand), xi)
            ok = ~active | (np.isfinite(cll) & (cll >= ll - 1e-12 * np.abs(ll)))
            if ok.all():
                break
            t = np.where(ok, t, 0.5 * t)
        eta = np.where(active, cand, eta)
        ll = np.where(active, cll, ll)
    return eta


def fit_clim_gpd(excesses, tol_xi=1e-6, tol_ll=1e-9, max_sweeps=200, mode="profile", min_excess=30):
    """Pseudo-likelihood GPD with site-specific scales and a shared shape.

    Parameters
    ----------
    excesses : list of 1-d arrays
        Threshold excesses per grid site.
    mode : {"profile", "coordinate"}
        In ``"profile"`` mode each shape update maximises the likelihood with
        the scales re-optimised for every candidate shape (a profile search);
        ``"coordinate"`` holds the scales fixed during the shape update.
        Both alternate with per-site scale updates until the shape moves by
        less than ``tol_xi`` and the relative likelihood change is below
        ``tol_ll``.
    """
    excesses = [np.asarray(e, dtype=float) for e in excesses]
    few = [i for i, e in enumerate(excesses) if len(e) < min_excess]
    if few:
        raise InsufficientDataError(f"{len(few)} grid sites have fewer than {min_excess} excesses (first: {few[0]})")
    if any(np.any(e < 0) for e in excesses):
        raise ValueError("excesses must be non-negative")
    Y, mask = _pad(excesses)
    n = mask.sum(axis=1)
    means = np.where(mask, Y, 0.0).sum(axis=1) / n

    xi = 0.0
    eta = np.log(means)
    eta = _sigma_step(Y, mask, xi, eta)
    ll = float(_site_loglik(Y, mask, np.exp(eta), xi).sum())
    trace = [(xi, ll)]
    converged = False
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        eta_ref = eta.copy()
        if mode == "profile":

            def neg_profile(x):
                e = _sigma_newton(Y, mask, x, eta_ref)
                return -float(_site_loglik(Y, mask, np.exp(e), x).sum())

            new_xi, _ = bounded_scalar(neg_profile, *XI_BOUNDS, xtol=1e-9)
        elif mode == "coordinate":
            ymax = np.where(mask, Y, 0.0).max(axis=1)
            sig = np.exp(eta)
            lo = max(XI_BOUNDS[0], float(np.max(-sig / ymax)) + 1e-9)

            def neg_xi(x):
                return -float(_site_loglik(Y, mask, sig, x).sum())

            new_xi, _ = bounded_scalar(neg_xi, lo, XI_BOUNDS[1], xtol=1e-10)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        eta = _sigma_step(Y, mask, new_xi, eta)
        new_ll = float(_site_loglik(Y, mask, np.exp(eta), new_xi).sum())
        if new_ll < ll - 1e-9 * abs(ll):
            # a worse step is rejected; shrink it toward the previous shape
            step = new_xi - xi
            for _ in range(30):
                step *= 0.5
                cand_eta = _sigma_step(Y, mask, xi + step, eta_ref)
                cand_ll = float(_site_loglik(Y, mask, np.exp(cand_eta), xi + step).sum())
                if cand_ll >= ll:
                    new_xi, eta, new_ll = xi + step, cand_eta, cand_ll
                    break
            else:
                new_xi, eta, new_ll = xi, eta_ref, ll
        trace.append((new_xi, new_ll))
        dxi = abs(new_xi - xi)
        dll = abs(new_ll - ll) / max(abs(ll), 1e-300)
        xi, ll = new_xi, new_ll
        logger.debug("sweep %d xi=%.8f pl=%.10g", sweeps, xi, ll)
        if dxi < tol_xi and dll < tol_ll:
            converged = True
            break
    if not converged:
        logger.warning("climate GPD fit stopped after %d sweeps without converging", sweeps)
    return ClimTailFit(np.exp(eta), float(xi), ll, sweeps, converged, trace)


def grid_excesses(grid, u_c):
    """Per-site excesses of a complete grid above ``u_c``."""
    out = []
    for j in range(grid.n_sites):
        v = grid.values[grid.observed[:, j], j]
        out.append(v[v > u_c[j]] - u_c[j])
    return out


# ---------------------------------------------------------------------------
# Station GPD with covariate log-scale


@dataclass
class ObsTailFit:
    model_id: str
    covariate_spec: tuple
    theta: np.ndarray
    xi_o: float
    loglik: float
    n_excess: int = 0
    clim_scale_link: str = "identity"

    def log_sigma(self, points):
        return design(points, self.covariate_spec) @ np.asarray(self.theta)

    def sigma(self, points):
        return np.exp(self.log_sigma(points))

    def to_dict(self):
        return {
            "model_id": self.model_id,
            "covariate_spec": list(self.covariate_spec),
            "theta": [float(t) for t in self.theta],
            "xi_o": self.xi_o,
            "loglik": self.loglik,
            "n_excess": self.n_excess,
            "clim_scale_link": self.clim_scale_link,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            model_id=d["model_id"],
            covariate_spec=tuple(d["covariate_spec"]),
            theta=np.asarray(d["theta"], dtype=float),
            xi_o=float(d["xi_o"]),
            loglik=float(d["loglik"]),
            n_excess=int(d.get("n_excess", 0)),
            clim_scale_link=d.get("clim_scale_link", "identity"),
        )


def check_collinearity(X, names=None, limit=COND_LIMIT):
    norms = np.linalg.norm(X, axis=0)
    if np.any(norms == 0):
        raise CollinearityError(f"design column {names[int(np.argmin(norms))] if names else int(np.argmin(norms))} is all zero")
    cond = np.linalg.cond(X / norms)
    if not np.isfinite(cond) or cond > limit:
        raise CollinearityError(f"design is collinear (condition number {cond:.3g} > {limit:.0e})")
    return cond


def gpd_regression_loglik(y, X, theta, xi, offset=0.0):
    eta = X @ theta + offset
    return float(gpd_logpdf(y, np.exp(eta), xi).sum())


def _newton_theta(y, X, xi, theta0, offset, max_iter=100, tol=1e-10):
    """Maximise the GPD log-likelihood over log-linear scale coefficients.

    For ``xi > -1`` the likelihood is concave in each log-scale, hence in
    ``theta``; Newton steps with backtracking converge from any feasible
    start.
    """
    theta = np.array(theta0, dtype=float)

    def loglik(th):
        return gpd_regression_loglik(y, X, th, xi, offset)

    ll = loglik(theta)
    if not np.isfinite(ll):
        raise ConvergenceError("infeasible starting point", x=theta, grad_norm=np.nan)
    g = np.zeros_like(theta)
    for _ in range(max_iter):
        eta = X @ theta + offset
        w = y * np.exp(-eta)
        den = 1.0 + xi * w
        a = -1.0 + (1.0 + xi) * w / den
        b = (1.0 + xi) * w / den**2
        g = X.T @ a
        H = (X * b[:, None]).T @ X
        try:
            step = np.linalg.solve(H + 1e-12 * np.trace(H) / len(theta) * np.eye(len(theta)), g)
        except np.linalg.LinAlgError:
            step = g / max(np.trace(H), 1e-12)
        decrement = float(g @ step)
        if decrement < tol:
            return theta, ll, float(np.linalg.norm(g))
        t = 1.0
        while t > 1e-12:
            cand = theta + t * step
            cll = loglik(cand)
            if np.isfinite(cll) and cll >= ll + 1e-4 * t * decrement:
                break
            t *= 0.5
        else:
            return theta, ll, float(np.linalg.norm(g))
        theta, ll = cand, cll
    raise ConvergenceError("Newton iterations for the GPD scale did not converge", x=theta, grad_norm=float(np.linalg.norm(g)))


def _feasible_start(y, X, xi, offset):
    """Intercept-only start with sigma safely inside the support."""
    sig = np.mean(y) * (1.0 - xi)
    if xi < 0:
        sig = max(sig, -xi * np.max(y) * 1.05 * np.exp(np.max(np.abs(offset)) if np.ndim(offset) else 0.0))
    theta = np.zeros(X.shape[1])
    # least-squares projection of a constant log-scale onto the design
    target = np.full(len(y), np.log(sig)) - offset
    theta, *_ = np.linalg.lstsq(X, target, rcond=None)
    if not np.isfinite(gpd_regression_loglik(y, X, theta, xi, offset)):
        theta = theta + np.linalg.lstsq(X, np.full(len(y), 1.0), rcond=None)[0] * np.log(10.0)
    return theta


def fit_gpd_regression(y, X, xi=None, fixed=None, theta0=None, xi_bounds=XI_BOUNDS, names=None, xtol=1e-9):
    """Profile-likelihood fit of ``log sigma = X @ theta`` and a shared shape.

    Parameters
    ----------
    fixed : dict, optional
        ``{column index: value}`` coefficients held fixed.
    xi : float, optional
        Hold the shape fixed (only ``theta`` is estimated).

    Returns ``(theta, xi, loglik)``.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if np.any(y < 0):
        raise ValueError("excesses must be non-negative")
    fixed = dict(fixed or {})
    free = [j for j in range(X.shape[1]) if j not in fixed]
    Xf = X[:, free]
    offset = np.zeros(len(y))
    for j, v in fixed.items():
        offset = offset + X[:, j] * v
    if free:
        check_collinearity(Xf, [names[j] for j in free] if names else None)
    state = {"theta": None if theta0 is None else np.asarray(theta0, dtype=float)[free]}

    def solve(x):
        if not free:
            return np.zeros(0), gpd_regression_loglik(y, Xf, np.zeros(0), x, offset)
        start = state["theta"]
        if start is None or not np.isfinite(gpd_regression_loglik(y, Xf, start, x, offset)):
            start = _feasible_start(y, Xf, x, offset)
        th, ll, _ = _newton_theta(y, Xf, x, start, offset)
        state["theta"] = th
        return th, ll

    if xi is not None:
        th, ll = solve(float(xi))
        best_xi = float(xi)
    else:
        # coarse scan to bracket the profile maximum, then Brent
        grid = np.linspace(xi_bounds[0] + 0.05, xi_bounds[1] - 0.05, 17)
        prof = []
        for x in grid:
            try:
                prof.append(solve(x)[1])
            except ConvergenceError:
                prof.append(-np.inf)
        k = int(np.argmax(prof))
        lo = grid[k - 1] if k > 0 else xi_bounds[0]
        hi = grid[k + 1] if k < len(grid) - 1 else xi_bounds[1]
        state["theta"] = None
        solve(grid[k])
        best_xi, _ = bounded_scalar(lambda x: -solve(x)[1], lo, hi, xtol=xtol)
        th, ll = solve(best_xi)
    theta = np.zeros(X.shape[1])
    theta[free] = th
    for j, v in fixed.items():
        theta[j] = v
    return theta, float(best_xi), float(ll)


def fit_obs_gpd(y, points, model_id="M2", clim_scale_link="identity", fixed=None, xi=None, start=None, terms=None):
    """Fit one of the M0-M2 station tail models to threshold excesses.

    ``start`` may be another :class:`ObsTailFit` whose terms are a subset of
    this model's; its coefficients seed the search and its likelihood is a
    floor for the result.
    """
    terms = list(terms) if terms is not None else obs_terms(model_id, clim_scale_link)
    y = np.asarray(y, dtype=float)
    X = design(points, terms)
    theta0 = None
    if start is not None and set(start.covariate_spec) <= set(terms):
        theta0 = np.zeros(len(terms))
        for name, v in zip(start.covariate_spec, start.theta):
            theta0[terms.index(name)] = v
    theta, xi_hat, ll = fit_gpd_regression(y, X, xi=xi, fixed=fixed, theta0=theta0, names=terms)
    if theta0 is not None and xi is None and fixed is None:
        ll0 = gpd_regression_loglik(y, X, theta0, start.xi_o)
        if ll0 > ll:
            theta, xi_hat, ll = theta0, start.xi_o, ll0
    return ObsTailFit(model_id, tuple(terms), theta, xi_hat, ll, len(y), clim_scale_link)


def obs_excesses(y, points, threshold):
    """Select exceedances of the threshold; returns ``(excess, points)``."""
    u = threshold.u(points)
    hit = y > u
    return y[hit] - u[hit], points.take(np.flatnonzero(hit))


# ---------------------------------------------------------------------------
# Composite tail


@dataclass
class TailModel:
    threshold: ThresholdField
    obs_fit: ObsTailFit

    def to_dict(self):
        return {"threshold": self.threshold.to_dict(), "obs_fit": self.obs_fit.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(ThresholdField.from_dict(d["threshold"]), ObsTailFit.from_dict(d["obs_fit"]))


def tail_cdf(tm, body, x, points, record=None):
    """Composite distribution: body below ``u``, scaled GPD tail above."""
    x = np.broadcast_to(np.asarray(x, dtype=float), (len(points),))
    u = tm.threshold.u(points)
    lam = exceedance_rate(body, tm.threshold, points, record)
    sigma = tm.obs_fit.sigma(points)
    upper = 1.0 - lam * (1.0 - gpd_cdf(np.maximum(x - u, 0.0), sigma, tm.obs_fit.xi_o))
    below = x <= u
    if below.any():
        lower = body.cdf(np.where(below, x, u), points)
        return np.where(below, lower, upper)
    return upper


def tail_ppf(tm, body, p, points, record=None):
    """Inverse of :func:`tail_cdf`: body quantile or analytic GPD quantile."""
    p = np.broadcast_to(np.asarray(p, dtype=float), (len(points),))
    u = tm.threshold.u(points)
    lam = exceedance_rate(body, tm.threshold, points, record)
    sigma = tm.obs_fit.sigma(points)
    in_tail = p > 1.0 - lam
    with np.errstate(divide="ignore", invalid="ignore"):
        q_tail = 1.0 - (1.0 - p) / lam
        upper = u + gpd_ppf(np.clip(q_tail, 0.0, 1.0), sigma, tm.obs_fit.xi_o)
    if (~in_tail).any():
        lower = body.ppf(np.where(in_tail, 0.5, p), points)
        return np.where(in_tail, upper, lower)
    return upper
