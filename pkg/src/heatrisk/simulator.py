"""Brown-Resnick r-Pareto simulation with the mean risk functional.

A replicate is ``R * w`` where ``R`` is unit Pareto and ``w`` a profile with
``mean(w) = 1``.  Profiles come from a log-Gaussian field: with ``G`` a
centred Gaussian vector whose increments have variance ``gamma``, and ``K`` a
uniformly chosen normalising site,

    V(s) = exp{G(s) - G(s_K) - gamma(s, s_K) / 2},   w = V / mean(V).

Mixing over a uniform ``K`` tilts the law of ``V`` by its mean, which is
exactly the profile law of the r-Pareto process for ``r = mean``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .datastore import distance_matrix
from .dependence import matern_variogram
from .errors import HeatRiskError
from .margins import from_frechet

logger = logging.getLogger(__name__)

CHUNK = 4096
AUX_KEY = 1 << 30
JITTER = (1e-10, 1e-6)


class FactorizationError(HeatRiskError):
    def __init__(self, message, min_eig):
        self.min_eig = min_eig
        super().__init__(f"{message} (min eigenvalue {min_eig:.3g})")


@dataclass
class SimBatch:
    xy: np.ndarray
    profiles: np.ndarray
    risks: np.ndarray
    aux_risks: np.ndarray
    seed: int
    ref_site: int

    @property
    def m(self):
        return self.profiles.shape[0]

    @property
    def L(self):
        return len(self.aux_risks)

    @property
    def omega(self):
        """Componentwise maximum of the profiles."""
        return self.profiles.max(axis=0)


def reference_site(xy):
    """Index of the site nearest the centroid."""
    xy = np.asarray(xy, dtype=float)
    return int(np.argmin(((xy - xy.mean(axis=0)) ** 2).sum(axis=1)))


def variogram_matrix(xy, vario):
    return matern_variogram(distance_matrix(xy), vario)


def gaussian_factor(gamma, ref):
    """Lower factor of ``Cov(G_i, G_j) = (gamma_i0 + gamma_j0 - gamma_ij) / 2``.

    The reference site has ``G = 0`` and is dropped from the factor.  If the
    plain factorization fails, jitter escalates from 1e-10 by factors of ten
    up to 1e-6, relative to the largest variance.
    """
    S = gamma.shape[0]
    others = np.array([k for k in range(S) if k != ref], dtype=int)
    g0 = gamma[others, ref]
    C = 0.5 * (g0[:, None] + g0[None, :] - gamma[np.ix_(others, others)])
    if len(others) == 0 or not np.any(C):
        return others, np.zeros((len(others), len(others)))
    try:
        return others, np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER[0]
    eye = np.eye(len(others)) * max(float(np.diag(C).max()), np.finfo(float).tiny)
    while jitter <= JITTER[1] * (1 + 1e-9):
        try:
            return others, np.linalg.cholesky(C + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise FactorizationError("covariance not positive semidefinite after jitter", float(np.linalg.eigvalsh(C).min()))


def _chunk_rng(seed, key):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(key,))))


def simulate_profiles(vario, xy, m, L=300, seed=0, ref=None, chunk=CHUNK):
    """Draw ``m`` unit-risk profiles with paired Pareto risks, plus ``L`` auxiliary risks.

    Each chunk of ``chunk`` replicates uses its own counter-based stream keyed
    by ``(seed, chunk index)``, so results do not depend on how chunks are
    scheduled.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    S = len(xy)
    ref = reference_site(xy) if ref is None else int(ref)
    gamma = variogram_matrix(xy, vario)
    if not np.all(np.isfinite(gamma)):
        raise ValueError("site distances must be finite")
    others, Lc = gaussian_factor(gamma, ref)

    profiles = np.empty((m, S))
    risks = np.empty(m)
    for c, start in enumerate(range(0, m, chunk)):
        n = min(chunk, m - start)
        rng = _chunk_rng(seed, c)
        Z = rng.standard_normal((n, len(others)))
        K = rng.integers(0, S, size=n)
        U = rng.random(n)
        G = np.zeros((n, S))
        G[:, others] = Z @ Lc.T
        logV = G - G[np.arange(n), K][:, None] - 0.5 * gamma[K]
        logV -= logV.max(axis=1, keepdims=True)
        V = np.exp(logV)
        profiles[start : start + n] = V / V.mean(axis=1, keepdims=True)
        risks[start : start + n] = 1.0 / (1.0 - U)
    aux = 1.0 / (1.0 - _chunk_rng(seed, AUX_KEY).random(int(L)))
    return SimBatch(xy=xy, profiles=profiles, risks=risks, aux_risks=aux, seed=int(seed), ref_site=ref)


def pareto_fields(batch, v_r=1.0):
    """Pareto-scale realisations ``v_r * r_i * w_i``."""
    return v_r * batch.risks[:, None] * batch.profiles


def to_data_scale(batch, margins, points, v_r):
    """Map ``r_i v_r w_i`` sitewise through the Fréchet inverse at fixed conditions.

    ``points`` must hold one point per batch site (in batch order).
    """
    Y = pareto_fields(batch, v_r)
    m, S = Y.shape
    rep = points.take(np.tile(np.arange(S), m))
    return from_frechet(Y.ravel(), margins, rep).reshape(m, S)


def save_batch(batch, directory, float_format="%.17g"):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(batch.profiles, columns=[f"s{k}" for k in range(batch.profiles.shape[1])]).to_csv(
        d / "profiles.csv", index=False, float_format=float_format
    )
    pd.DataFrame({"risk": batch.risks}).to_csv(d / "risks.csv", index=False, float_format=float_format)
    pd.DataFrame({"aux_risk": batch.aux_risks}).to_csv(d / "aux_risks.csv", index=False, float_format=float_format)
    meta = {"seed": batch.seed, "ref_site": batch.ref_site, "m": batch.m, "L": batch.L, "xy": batch.xy.tolist()}
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_batch(directory):
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    return SimBatch(
        xy=np.asarray(meta["xy"], dtype=float).reshape(-1, 2),
        profiles=pd.read_csv(d / "profiles.csv", float_precision="round_trip").to_numpy(dtype=float),
        risks=pd.read_csv(d / "risks.csv", float_precision="round_trip")["risk"].to_numpy(dtype=float),
        aux_risks=pd.read_csv(d / "aux_risks.csv", float_precision="round_trip")["aux_risk"].to_numpy(dtype=float),
        seed=int(meta["seed"]),
        ref_site=int(meta["ref_site"]),
    )
