import numpy as np
import pytest
from scipy.stats import norm

from heatrisk.body_model import DEFAULT_TAUS, AldFit, BodyModel
from heatrisk.covariates import SiteTable, site_points
from heatrisk.datastore import SiteMeta, StationPanel
from heatrisk.margins import MarginalModel
from heatrisk.tail_model import ObsTailFit, TailModel, ThresholdField


def make_sites(n, kind="station"):
    return [SiteMeta(f"s{k:02d}", float(k), 0.0, 1.0 + k, kind) for k in range(n)]


def make_panel(values, observed=None, scale="data", year=None, day=None):
    values = np.asarray(values, dtype=float)
    n_t, n_s = values.shape
    if observed is None:
        observed = np.isfinite(values)
    if year is None:
        year = np.repeat(np.arange(2000, 2000 + n_t // 92 + 1), 92)[:n_t]
    if day is None:
        day = np.tile(np.arange(92), n_t // 92 + 1)[:n_t]
    return StationPanel(make_sites(n_s), year, day, np.where(observed, values, np.nan), observed, scale=scale)


def site_table(n, qc_shift=None, sigma_c=None, taus=(0.9,)):
    taus = np.asarray(taus, dtype=float)
    shift = np.zeros(n) if qc_shift is None else np.asarray(qc_shift, dtype=float)
    qc = shift[:, None] + norm.ppf(taus)[None, :]
    iu = int(np.argmin(np.abs(taus - 0.9)))
    return SiteTable([f"s{k}" for k in range(n)], taus, qc, qc[:, iu], np.linspace(1, 50, n), sigma_c)


def normal_gpd_margins(u=None, sigma=0.5, xi=-0.1, taus=DEFAULT_TAUS, loc=0.0):
    """Normal(loc, 1) body with a GPD tail above ``u`` (default: the 0.9 quantile)."""
    u = loc + float(norm.ppf(0.9)) if u is None else u
    fits = [AldFit(float(t), np.array([loc + norm.ppf(t)]), 0.0, ("const",)) for t in taus]
    body = BodyModel(np.asarray(taus), fits)
    thr = ThresholdField(AldFit(0.9, np.array([u, 0.0]), 0.0, ("const", "u_c")))
    obs = ObsTailFit("M0", ("const",), np.array([np.log(sigma)]), xi, 0.0)
    return MarginalModel(body, TailModel(thr, obs))


@pytest.fixture
def margins():
    return normal_gpd_margins()


@pytest.fixture
def points():
    return site_points(site_table(4))


ACCEPTANCE = []


def record_criterion(label, ok, detail):
    """Log one acceptance line; the terminal summary repeats them all."""
    line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
