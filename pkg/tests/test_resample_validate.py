from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import kstest

from heatrisk.covariates import Points
from heatrisk.errors import ConvergenceError, InsufficientDataError
from heatrisk.resample_validate import (
    BootstrapPlan,
    FoldSpec,
    bias_correct,
    block_bootstrap,
    crps_piecewise,
    cross_validate,
    make_folds,
    site_year_quantiles,
)
from heatrisk.synthkit import covariate_gpd_sample
from heatrisk.tail_model import fit_obs_gpd

from conftest import make_panel, site_table


def uniform_panel(n_years=6, n_sites=5, missing=0.2, seed=0):
    rng = np.random.default_rng(seed)
    u = rng.random((92 * n_years, n_sites))
    obs = rng.random(u.shape) >= missing
    return make_panel(u, obs, scale="uniform")


def test_masks_bit_identical():
    panel = uniform_panel()
    for rep in block_bootstrap(panel, BootstrapPlan(5, 10, seed=1)):
        np.testing.assert_array_equal(rep.panel.observed, panel.observed)
        assert np.all(np.isfinite(rep.panel.values[panel.observed]))
        assert np.all(np.isnan(rep.panel.values[~panel.observed]))
        assert rep.panel.scale == "uniform"


def test_full_summer_blocks_permute_summers():
    panel = uniform_panel(missing=0.0)
    summers = [panel.values[panel.year == y] for y in np.unique(panel.year)]
    for rep in block_bootstrap(panel, BootstrapPlan(92, 5, seed=2)):
        assert rep.n_filled_other == rep.n_filled_uniform == 0
        for y in np.unique(panel.year):
            got = rep.panel.values[panel.year == y]
            assert any(np.array_equal(got, s) for s in summers)


def test_replicates_are_uniform():
    panel = uniform_panel(n_years=10, seed=3)
    rep = next(block_bootstrap(panel, BootstrapPlan(5, 1, seed=4)))
    assert kstest(rep.panel.values[panel.observed], "uniform").pvalue > 0.01


def test_replicates_reproducible_by_id():
    panel = uniform_panel()
    plan = BootstrapPlan(5, 4, seed=5)
    all_reps = [r.panel.values for r in block_bootstrap(panel, plan)]
    third = next(block_bootstrap(panel, plan, replicate_ids=[2])).panel.values
    np.testing.assert_array_equal(third, all_reps[2])


def test_bootstrap_plan_validation():
    with pytest.raises(ValueError):
        BootstrapPlan(93)
    with pytest.raises(ValueError):
        BootstrapPlan(0)
    with pytest.raises(ValueError):
        next(block_bootstrap(make_panel(np.ones((92, 2)) * 0.5, scale="pareto"), BootstrapPlan()))


def fake_fit(xi):
    return SimpleNamespace(xi_o=xi)


def test_bias_shift_arithmetic():
    fits = [fake_fit(x) for x in np.linspace(-0.25, -0.11, 100)]  # mean -0.18
    res = bias_correct(fits, fake_fit(-0.15), lambda i, xi: fake_fit(xi))
    assert res.shift == pytest.approx(0.03, abs=1e-12)
    np.testing.assert_allclose([f.xi_o for f in res.fits], [f.xi_o + 0.03 for f in fits], atol=1e-12)


def test_bias_correction_drops_failed_refits():
    fits = [fake_fit(-0.1)] * 100

    def refit(i, xi):
        if i == 7:
            raise ConvergenceError("no")
        return fake_fit(xi)

    res = bias_correct(fits, fake_fit(-0.1), refit)
    assert res.n_dropped == 1 and res.dropped == [7] and len(res.fits) == 99
    with pytest.raises(InsufficientDataError):
        bias_correct(fits[:99], fake_fit(-0.1), refit)


@pytest.fixture(scope="module")
def gpd_replicates():
    y, pts = covariate_gpd_sample(400, (0.2, 1.0, 0.5), -0.15, np.random.default_rng(6))
    rng = np.random.default_rng(7)
    data = []
    for _ in range(100):
        idx = rng.integers(0, len(y), len(y))
        data.append((y[idx], pts.take(idx)))
    full = fit_obs_gpd(y, pts, "M0")
    fits = [fit_obs_gpd(yy, pp, "M0") for yy, pp in data]
    return data, full, fits


def test_bias_correction_refits_and_is_idempotent(gpd_replicates):
    data, full, fits = gpd_replicates

    def refit(i, xi):
        return fit_obs_gpd(data[i][0], data[i][1], "M0", xi=xi)

    first = bias_correct(fits, full, refit)
    assert np.mean([f.xi_o for f in first.fits]) == pytest.approx(full.xi_o, abs=1e-12)
    second = bias_correct(first.fits, full, refit)
    assert abs(second.shift) < 1e-12
    for a, b in zip(first.fits, second.fits):
        np.testing.assert_allclose(b.theta, a.theta, atol=1e-6)


def test_k90_pigeonhole():
    panel = make_panel(np.arange(90.0).reshape(45, 2))
    folds = make_folds(panel, "K90", seed=1)
    assert sorted(folds.assignments.ravel().tolist()) == list(range(90))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.6))
def test_k90_partition(seed, missing):
    rng = np.random.default_rng(seed)
    obs = rng.random((200, 4)) >= missing
    panel = make_panel(rng.random((200, 4)), obs)
    folds = make_folds(panel, "90", seed=seed)
    a = folds.assignments
    assert np.all(a[~obs] == -1) and np.all((a[obs] >= 0) & (a[obs] < 90))
    total = np.zeros(obs.shape, dtype=int)
    for _, held in folds.masks():
        total += held
    np.testing.assert_array_equal(total, obs.astype(int))
    sizes = np.bincount(a[obs], minlength=90)
    assert sizes.max() - sizes.min() <= 1


def test_st_folds():
    rng = np.random.default_rng(8)
    n_sites = 40
    obs = rng.random((92, n_sites)) > 0.1
    panel = make_panel(rng.random((92, n_sites)), obs)
    xy = rng.uniform(0, 300, (n_sites, 2))
    folds = make_folds(panel, "st", xy=xy, seed=3)
    assert folds.kind == "ST" and folds.n_folds == 90
    a = folds.assignments
    assert np.all(a[~obs] == -1)
    group = a[obs] % 3
    rows = np.nonzero(obs)[0]
    np.testing.assert_array_equal(group, (panel.day[rows] // 7) % 3)
    assert [(d // 7) % 3 for d in (0, 6, 7, 13, 14, 20, 21, 27)] == [0, 0, 1, 1, 2, 2, 0, 0]
    # each site lives in one spatial cluster
    cl = np.where(obs, a // 3, -1)
    for s in range(n_sites):
        assert len(set(cl[obs[:, s], s].tolist())) == 1
    with pytest.raises(InsufficientDataError):
        make_folds(make_panel(np.ones((92, 5))), "ST", xy=xy[:5])
    with pytest.raises(ValueError):
        make_folds(panel, "LOO")


def test_crps_degenerate_and_uniform():
    assert crps_piecewise([[0.3, 0.3 + 1e-12]], [0.0, 1.0], [0.3])[0] == pytest.approx(0.0, abs=1e-9)
    levels = np.linspace(0, 1, 1001)
    assert crps_piecewise(levels[None, :], levels, [0.5])[0] == pytest.approx(1 / 12, abs=1e-4)


@settings(max_examples=40, deadline=None)
@given(st.floats(-2, 3))
def test_crps_uniform_closed_form(y):
    levels = np.linspace(0, 1, 1001)
    if y < 0:
        expected = -y + 1 / 3
    elif y > 1:
        expected = y - 1 + 1 / 3
    else:
        expected = y**3 / 3 + (1 - y) ** 3 / 3
    assert crps_piecewise(levels[None, :], levels, [y])[0] == pytest.approx(expected, abs=1e-6)


def test_site_year_quantiles_min_obs():
    vals = np.arange(92 * 2, dtype=float).reshape(92, 2)
    obs = np.ones_like(vals, bool)
    obs[5:, 1] = False
    years, q = site_year_quantiles(make_panel(vals, obs), [0.5], min_obs=10)
    assert years.tolist() == [2000]
    assert q[0, 0, 0] == pytest.approx(np.median(vals[:, 0]))
    assert np.isnan(q[0, 1, 0])


def test_cross_validate_with_true_model(margins):
    rng = np.random.default_rng(9)
    table = site_table(3)
    n_t = 92 * 3
    cols = np.tile(np.arange(3), n_t)
    x = margins.ppf(rng.random(n_t * 3), Points(cols, table, {})).reshape(n_t, 3)
    panel = make_panel(x)
    folds = FoldSpec("K90", make_folds(panel, "K90", seed=0).assignments)
    scores = cross_validate(panel, folds, lambda train: margins, lambda r, c: Points(c, table, {}), [0.5], max_folds=3)
    assert len(scores.per_fold) == 3
    assert scores.n_crps == sum(f["n_crps"] for f in scores.per_fold)
    # CRPS of a standard normal forecast for its own draws averages 1/sqrt(pi)
    assert scores.crps == pytest.approx(1 / np.sqrt(np.pi), abs=0.1)
