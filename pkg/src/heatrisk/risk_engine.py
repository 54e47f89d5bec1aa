"""Spatial event probabilities by scaled importance sampling.

For a critical temperature ``T`` at given year conditions, each site gets a
Pareto-scale threshold ``T^P(s) = 1 / (1 - F(T))``.  With the profile
componentwise maximum ``omega`` and ``b = min_s T^P(s) / omega(s)``, every
scaled field ``r_j * b * w_i`` has a chance to hit the event, and

    Pr(A) ~= 1 / (b m L) * sum_i sum_j 1{exists s: r_j b w_i(s) > T^P(s)}.

Writing ``c_i = min_s T^P(s) / (b w_i(s)) >= 1`` the inner sum over ``j`` is
the number of auxiliary risks above ``c_i``, counted exactly from the sorted
risks.  The scaling absorbs the risk threshold (``b = v_r * b_A``), so when
``b < v_r`` the estimator falls back to ``b = v_r``, i.e. fields at the
fitted risk threshold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import HeatRiskError

logger = logging.getLogger(__name__)

SUMMER_DAYS = 92
N_SE_BATCHES = 50


class BelowThresholdError(HeatRiskError, ValueError):
    """Requested level lies in the body; use body quantiles instead."""


@dataclass
class EventSpec:
    T: float
    conditions: dict
    site_set: str = "stations"
    label: str = ""


@dataclass
class Estimate:
    value: float
    se: float


@dataclass
class EventEstimate:
    prob: float
    se: float
    b: float
    scaled: bool
    n_hits: int

    @property
    def return_period(self):
        return return_period(self.prob)


def return_period(prob, days=SUMMER_DAYS):
    """Years between events for a daily summer probability."""
    prob = np.asarray(prob, dtype=float)
    with np.errstate(divide="ignore"):
        out = 1.0 / (days * prob)
    return out if out.ndim else float(out)


def period_to_prob(period, days=SUMMER_DAYS):
    return 1.0 / (days * np.asarray(period, dtype=float))


def marginal_return_level(margins, points, period_years):
    """Level exceeded with daily probability ``1 / (92 * period)``."""
    q = period_to_prob(period_years)
    lam = margins.rate(points)
    if np.any(q >= lam):
        raise BelowThresholdError(
            f"a {period_years}-year level falls below the threshold at {int(np.sum(q >= lam))} sites; use body quantiles"
        )
    return margins.ppf(np.full(len(points), 1.0 - q), points)


def threshold_on_pareto(T, margins, points, check_threshold=True):
    """Per-site ``T^P = 1 / (1 - F(T))``; ``inf`` where ``T`` is beyond the endpoint."""
    if check_threshold:
        u = margins.threshold(points)
        if np.any(T < u):
            raise ValueError(f"T={T} lies below the threshold at {int(np.sum(T < u))} sites (max u = {u.max():.3f})")
    F = margins.cdf(np.full(len(points), float(T)), points)
    with np.errstate(divide="ignore"):
        return np.where(F >= 1.0, np.inf, 1.0 / (1.0 - F))


def _scaling(batch, TP, v_r, b=None):
    if b is not None:
        return float(b), True
    with np.errstate(divide="ignore"):
        b_T = float(np.min(TP / batch.omega))
    if not np.isfinite(b_T):
        return np.inf, True
    if b_T < v_r:
        logger.warning("scaling b=%.4g is below the risk threshold %.4g; using unscaled fields", b_T, v_r)
        return float(v_r), False
    return b_T, True


def _site_levels(batch, TP, b):
    """``c_is = T^P(s) / (b w_i(s))``: risk needed for site s to exceed."""
    with np.errstate(divide="ignore"):
        return TP[None, :] / (b * batch.profiles)


def _count_above(sorted_aux, c):
    """Number of auxiliary risks strictly above each level in ``c``."""
    return len(sorted_aux) - np.searchsorted(sorted_aux, c, side="right")


def _aux_totals(sorted_aux, C, weights=None):
    """Per auxiliary risk, the (weighted) number of levels it exceeds.

    ``C`` is ``m x k``; column ``k`` contributes ``weights[k]`` per profile
    whose level lies strictly below the risk.
    """
    weights = np.ones(C.shape[1]) if weights is None else np.asarray(weights, dtype=float)
    t = np.zeros(len(sorted_aux))
    for k in range(C.shape[1]):
        col = np.sort(C[:, k])
        t += weights[k] * np.searchsorted(col, sorted_aux, side="left")
    return t


def _estimate(per_profile, per_aux, n_batches, denom):
    """Double-sum estimate with a two-part standard error.

    Profiles are grouped into ``n_batches`` batch means; the shared auxiliary
    risks add a second, independent component ``sd(per_aux) / sqrt(L)``.
    """
    m = len(per_profile)
    total = float(np.sum(per_profile) / denom)
    k = min(n_batches, m)
    se_prof = 0.0
    if k >= 2:
        groups = np.array_split(np.arange(m), k)
        means = np.array([per_profile[g].sum() / (denom * len(g) / m) for g in groups])
        se_prof = float(means.std(ddof=1) / np.sqrt(k))
    L = len(per_aux)
    se_aux = float(np.std(per_aux, ddof=1) * L / denom / np.sqrt(L)) if L > 1 else 0.0
    return total, float(np.hypot(se_prof, se_aux))


def prob_event(batch, TP, v_r, b=None, n_batches=N_SE_BATCHES):
    """Importance-sampling estimate of ``Pr{exists s: X^P(s) > T^P(s)}``.

    ``b`` overrides the automatic scaling (used for scaling-property checks).
    """
    b, scaled = _scaling(batch, TP, v_r, b)
    if not np.isfinite(b):
        return EventEstimate(0.0, 0.0, b, scaled, 0)
    aux = np.sort(batch.aux_risks)
    c = _site_levels(batch, TP, b).min(axis=1)
    counts = _count_above(aux, c).astype(float)
    p, se = _estimate(counts, _aux_totals(aux, c[:, None]), n_batches, b * batch.m * batch.L)
    return EventEstimate(p, se, b, scaled, int(counts.sum()))


def naive_prob_event(batch, TP, v_r):
    """Direct estimate from the paired fields ``v_r r_i w_i`` (no scaling).

    Each field stands for the process above the risk threshold, which occurs
    with probability ``1 / v_r`` on the Pareto scale.
    """
    hit = (v_r * batch.risks[:, None] * batch.profiles > TP[None, :]).any(axis=1)
    p = hit.mean()
    se = np.sqrt(p * (1 - p) / batch.m)
    return Estimate(float(p / v_r), float(se / v_r))


@dataclass
class Coverage:
    e_c: Estimate
    e_c_given_a: Estimate
    prob: Estimate
    b: float


def expected_coverage(batch, TP, v_r, n_batches=N_SE_BATCHES):
    """Expected exceedance fraction, its mean given the event, and Pr{A}.

    All three come from the same scaled sums; a site can only exceed inside
    the event, so ``E(C) = E(C|A) Pr(A)`` holds up to rounding.
    """
    b, _ = _scaling(batch, TP, v_r)
    if not np.isfinite(b):
        zero = Estimate(0.0, 0.0)
        return Coverage(zero, Estimate(float("nan"), float("nan")), zero, b)
    aux = np.sort(batch.aux_risks)
    C = _site_levels(batch, TP, b)
    per_site = _count_above(aux, C).astype(float)
    cov_sum = per_site.mean(axis=1)
    hits = _count_above(aux, C.min(axis=1)).astype(float)
    denom = b * batch.m * batch.L
    S = C.shape[1]
    e_c = _estimate(cov_sum, _aux_totals(aux, C, np.full(S, 1.0 / S)), n_batches, denom)
    pr = _estimate(hits, _aux_totals(aux, C.min(axis=1)[:, None]), n_batches, denom)
    ratio = float(cov_sum.sum() / hits.sum()) if hits.sum() > 0 else float("nan")
    groups = np.array_split(np.arange(batch.m), min(n_batches, batch.m))
    with np.errstate(invalid="ignore", divide="ignore"):
        ratios = np.array([cov_sum[g].sum() / hits[g].sum() for g in groups])
    ratios = ratios[np.isfinite(ratios)]
    se_ratio = float(ratios.std(ddof=1) / np.sqrt(len(ratios))) if len(ratios) > 1 else float("nan")
    return Coverage(Estimate(*e_c), Estimate(ratio, se_ratio), Estimate(*pr), b)


@dataclass
class ChiDataScale:
    h: np.ndarray
    conditional: np.ndarray
    unconditional: np.ndarray
    n_pairs: np.ndarray
    flagged: np.ndarray


def distance_pairs(D, h, half_width):
    """Ordered site pairs at distance ``h +- half_width``; self-pairs for ``h = 0``."""
    if h == 0:
        idx = np.arange(D.shape[0])
        return idx, idx
    i, j = np.nonzero((np.abs(D - h) <= half_width) & ~np.eye(D.shape[0], dtype=bool))
    return i, j


def chi_data_scale(batch, TP, v_r, D, h_grid, bin_width=20.0):
    """Conditional and unconditional joint-exceedance measures at distance ``h``.

    Conditional: among scaled fields in which a site exceeds ``T``, the
    fraction in which a partner at distance ``h`` also exceeds.
    Unconditional: the probability that both exceed, averaged over pairs.
    """
    b, _ = _scaling(batch, TP, v_r)
    h_grid = np.atleast_1d(np.asarray(h_grid, dtype=float))
    cond = np.full(len(h_grid), np.nan)
    uncond = np.full(len(h_grid), np.nan)
    n_pairs = np.zeros(len(h_grid), dtype=int)
    flagged = np.zeros(len(h_grid), dtype=bool)
    if not np.isfinite(b):
        return ChiDataScale(h_grid, cond, np.zeros(len(h_grid)), n_pairs, np.ones(len(h_grid), dtype=bool))
    aux = np.sort(batch.aux_risks)
    C = _site_levels(batch, TP, b)
    single = _count_above(aux, C).astype(float)
    denom = b * batch.m * batch.L
    for k, h in enumerate(h_grid):
        i, j = distance_pairs(D, h, bin_width / 2.0)
        n_pairs[k] = len(i)
        if len(i) == 0:
            flagged[k] = True
            continue
        both = 0.0
        for start in range(0, len(i), 256):
            ii, jj = i[start : start + 256], j[start : start + 256]
            both += _count_above(aux, np.maximum(C[:, ii], C[:, jj])).sum(dtype=float)
        first = single[:, i].sum()
        uncond[k] = both / (denom * len(i))
        if first > 0:
            cond[k] = both / first
        else:
            flagged[k] = True
    return ChiDataScale(h_grid, cond, uncond, n_pairs, flagged)
