"""Probability integral transforms through the composite marginal model."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .body_model import BodyModel
from .covariates import panel_points
from .errors import MarginError
from .tail_model import TailModel, exceedance_rate, tail_cdf, tail_ppf

logger = logging.getLogger(__name__)

UNIFORM_EPS = 1e-12


@dataclass
class MarginalModel:
    """Body below the threshold, GPD tail above; evaluated at :class:`Points`."""

    body: BodyModel
    tail: TailModel

    def cdf(self, x, points, record=None):
        return tail_cdf(self.tail, self.body, x, points, record)

    def ppf(self, p, points, record=None):
        return tail_ppf(self.tail, self.body, p, points, record)

    def threshold(self, points):
        return self.tail.threshold.u(points)

    def rate(self, points, record=None):
        return exceedance_rate(self.body, self.tail.threshold, points, record)

    def sigma(self, points):
        return self.tail.obs_fit.sigma(points)

    @property
    def xi(self):
        return self.tail.obs_fit.xi_o

    def to_dict(self):
        return {"body": self.body.to_dict(), "tail": self.tail.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(BodyModel.from_dict(d["body"]), TailModel.from_dict(d["tail"]))


def _panel_cdf(panel, margins, table, covs):
    points, y, rows, cols = panel_points(panel, table, covs)
    F = margins.cdf(y, points)
    return F, rows, cols


def to_pareto(panel, margins, table, covs=None):
    """Unit-Pareto scale ``1 / (1 - F(x))``; missing entries stay missing."""
    F, rows, cols = _panel_cdf(panel, margins, table, covs)
    bad = F >= 1.0
    if bad.any():
        entries = [(int(panel.year[r]), int(panel.day[r]), panel.sites[c].site_id) for r, c in zip(rows[bad], cols[bad])]
        raise MarginError(f"{len(entries)} observed values at or beyond the fitted upper endpoint: {entries[:5]}", entries)
    out = np.full(panel.values.shape, np.nan)
    out[rows, cols] = 1.0 / (1.0 - F)
    return panel.with_values(out, "pareto")


def to_uniform(panel, margins, table, covs=None):
    """Uniform scale ``F(x)``, kept strictly inside (0, 1)."""
    F, rows, cols = _panel_cdf(panel, margins, table, covs)
    out = np.full(panel.values.shape, np.nan)
    out[rows, cols] = np.clip(F, UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    return panel.with_values(out, "uniform")


def pareto_to_uniform(std):
    return std.with_values(1.0 - 1.0 / std.values, "uniform")


def from_uniform(u, margins, points):
    return margins.ppf(u, points)


def from_frechet(y, margins, points):
    """Data-scale value whose distribution function equals ``exp(-1/y)``."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("Frechet-scale values must be positive")
    return margins.ppf(np.exp(-1.0 / y), points)


def uniform_panel_to_data(std_uniform, margins, table, covs=None):
    """Back-transform a uniform-scale panel to the data scale."""
    points, u, rows, cols = panel_points(std_uniform, table, covs)
    out = np.full(std_uniform.values.shape, np.nan)
    out[rows, cols] = margins.ppf(u, points)
    return std_uniform.with_values(out, "data")
