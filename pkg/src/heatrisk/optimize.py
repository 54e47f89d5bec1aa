"""Small optimisation helpers shared by the marginal fitters."""

from __future__ import annotations

import numpy as np
from scipy import optimize

from .errors import ConvergenceError

_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


def golden_section(f, lo, hi, tol=1e-10, max_iter=200):
    """Vectorised golden-section minimisation with a parabolic polish.

    ``f`` maps an array of candidate points (one per problem) to an array of
    objective values.  Each problem ``i`` is searched on ``[lo[i], hi[i]]``
    and is assumed unimodal there.  Returns the minimisers.
    """
    a = np.array(lo, dtype=float)
    b = np.array(hi, dtype=float)
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if np.all(b - a <= tol * (1.0 + np.abs(a) + np.abs(b))):
            break
        left = fc < fd
        # keep [a, d] where the left probe wins, [c, b] otherwise
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = b - _INVPHI * (b - a)
        new_d = a + _INVPHI * (b - a)
        c_next = np.where(left, new_c, d)
        d_next = np.where(left, c, new_d)
        fc_next = np.where(left, np.nan, fd)
        fd_next = np.where(left, fc, np.nan)
        need_c = np.isnan(fc_next)
        need_d = np.isnan(fd_next)
        if need_c.any():
            fc_next = np.where(need_c, f(c_next), fc_next)
        if need_d.any():
            fd_next = np.where(need_d, f(d_next), fd_next)
        c, d, fc, fd = c_next, d_next, fc_next, fd_next
    x = np.where(fc < fd, c, d)
    fx = np.minimum(fc, fd)
    return _parabolic_polish(f, x, fx, 0.5 * (b - a))


def _parabolic_polish(f, x, fx, h):
    """One successive-parabola step through (x-h, x, x+h); kept only if it helps."""
    h = np.maximum(h, 1e-7 * (1.0 + np.abs(x)))
    f0, f1 = f(x - h), f(x + h)
    curv = f0 - 2.0 * fx + f1
    with np.errstate(divide="ignore", invalid="ignore"):
        step = np.where(curv > 0, 0.5 * h * (f0 - f1) / curv, 0.0)
    step = np.clip(step, -h, h)
    cand = x + step
    fcand = f(cand)
    better = np.isfinite(fcand) & (fcand < fx)
    return np.where(better, cand, x)


def bounded_scalar(f, lo, hi, xtol=1e-9):
    """Brent's bounded scalar minimiser; returns (x, f(x))."""
    res = optimize.minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": xtol, "maxiter": 500})
    if not res.success:
        raise ConvergenceError("bounded scalar search failed", x=res.x, grad_norm=np.nan)
    return float(res.x), float(res.fun)


def simplex_multistart(f, starts, scale, xatol=1e-8, fatol=1e-12, max_restarts=3):
    """Nelder-Mead from several starts, restarting each until it stops moving.

    Returns the scipy result with the lowest objective.
    """
    best = None
    for x0 in starts:
        x = np.asarray(x0, dtype=float)
        step = np.asarray(scale, dtype=float) * np.ones_like(x)
        prev = np.inf
        res = None
        for _ in range(max_restarts + 1):
            simplex = np.vstack([x, x + np.diag(step)])
            res = optimize.minimize(
                f,
                x,
                method="Nelder-Mead",
                options={
                    "initial_simplex": simplex,
                    "xatol": xatol,
                    "fatol": fatol,
                    "maxfev": 2000 * (len(x) + 1),
                    "adaptive": len(x) > 3,
                },
            )
            x = res.x
            if prev - res.fun <= fatol * (1.0 + abs(res.fun)):
                break
            prev = res.fun
            step = step * 0.1
        if best is None or res.fun < best.fun:
            best = res
    return best
