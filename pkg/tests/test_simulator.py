import numpy as np
import pytest

from heatrisk.covariates import site_points
from heatrisk.dependence import VariogramParams, chi_brown_resnick
from heatrisk.simulator import (
    FactorizationError,
    SimBatch,
    gaussian_factor,
    load_batch,
    pareto_fields,
    reference_site,
    save_batch,
    simulate_profiles,
    to_data_scale,
    variogram_matrix,
)

from conftest import site_table

VARIO = VariogramParams(1.5, 200.0, 1.0)


def grid_xy(k=4, spacing=60.0):
    g = np.arange(k) * spacing
    return np.array([(x, y) for x in g for y in g])


@pytest.mark.parametrize("alpha", [0.0, 1e-26])
def test_zero_variance_gives_flat_profiles(alpha):
    b = simulate_profiles(VariogramParams(alpha, 100.0, 1.0), grid_xy(3), 200, L=10, seed=0)
    np.testing.assert_allclose(b.profiles, 1.0, atol=1e-12)


def test_profiles_have_unit_risk_and_positive():
    b = simulate_profiles(VARIO, grid_xy(), 5000, L=50, seed=1)
    assert np.max(np.abs(b.profiles.mean(axis=1) - 1.0)) < 1e-12
    assert np.all(b.profiles > 0)
    assert np.all(b.risks > 1) and np.all(b.aux_risks > 1)
    assert b.m == 5000 and b.L == 50


def test_bitwise_reproducible_and_chunk_independent():
    a = simulate_profiles(VARIO, grid_xy(), 3000, L=20, seed=7)
    b = simulate_profiles(VARIO, grid_xy(), 3000, L=20, seed=7)
    np.testing.assert_array_equal(a.profiles, b.profiles)
    np.testing.assert_array_equal(a.risks, b.risks)
    np.testing.assert_array_equal(a.aux_risks, b.aux_risks)
    # whole chunks are shared between runs of different length
    c = simulate_profiles(VARIO, grid_xy(), 4100, L=20, seed=7, chunk=1000)
    e = simulate_profiles(VARIO, grid_xy(), 3000, L=20, seed=7, chunk=1000)
    np.testing.assert_array_equal(c.profiles[:3000], e.profiles)
    d = simulate_profiles(VARIO, grid_xy(), 3000, L=20, seed=8)
    assert not np.array_equal(a.risks, d.risks)


@pytest.mark.parametrize("y", [2, 5, 10])
def test_risks_are_unit_pareto(y):
    b = simulate_profiles(VARIO, grid_xy(2), 50_000, L=10, seed=2)
    p = 1.0 / y
    se = np.sqrt(p * (1 - p) / b.m)
    assert abs(np.mean(b.risks > y) - p) < 3 * se


def test_risk_profile_independence():
    b = simulate_profiles(VARIO, grid_xy(), 20_000, L=10, seed=3)
    f = b.profiles.max(axis=1)
    r = np.corrcoef(np.log(b.risks), f)[0, 1]
    assert abs(r) < 3 / np.sqrt(b.m)


def test_gaussian_increments_match_variogram():
    xy = grid_xy()
    gamma = variogram_matrix(xy, VARIO)
    ref = reference_site(xy)
    others, L = gaussian_factor(gamma, ref)
    C = L @ L.T
    np.testing.assert_allclose(np.diag(C), gamma[others, ref], rtol=1e-8)
    Z = np.random.default_rng(4).standard_normal((40_000, len(others))) @ L.T
    var = Z.var(axis=0)
    se = gamma[others, ref] * np.sqrt(2 / len(Z))
    assert np.all(np.abs(var - gamma[others, ref]) < 4 * se)
    i, j = 0, len(others) - 1
    inc = np.var(Z[:, i] - Z[:, j])
    assert inc == pytest.approx(gamma[others[i], others[j]], rel=0.05)


def test_reference_site_does_not_change_law():
    xy = grid_xy()
    p = 0.9
    v_p = 1 / (1 - p)
    out = []
    for ref in (0, reference_site(xy)):
        b = simulate_profiles(VARIO, xy, 40_000, L=10, seed=5, ref=ref)
        Y = pareto_fields(b)
        E = Y > v_p
        out.append(np.mean(E[:, 0] & E[:, 1]) / np.mean(E[:, 0]))
    assert out[0] == pytest.approx(out[1], abs=0.03)
    assert out[0] == pytest.approx(chi_brown_resnick(60.0, VARIO), abs=0.03)


def test_indefinite_covariance_raises():
    gamma = np.array([[0.0, 1.0, 100.0], [1.0, 0.0, 1.0], [100.0, 1.0, 0.0]])
    with pytest.raises(FactorizationError) as err:
        gaussian_factor(gamma, 1)
    assert err.value.min_eig < 0


def test_save_load_round_trip(tmp_path):
    b = simulate_profiles(VARIO, grid_xy(3), 50, L=7, seed=6)
    save_batch(b, tmp_path / "sim")
    back = load_batch(tmp_path / "sim")
    assert isinstance(back, SimBatch)
    np.testing.assert_array_equal(back.profiles, b.profiles)
    np.testing.assert_array_equal(back.aux_risks, b.aux_risks)
    assert back.seed == 6 and back.ref_site == b.ref_site


def test_data_scale_single_site_reduction(margins):
    b = simulate_profiles(VARIO, np.zeros((1, 2)), 200, L=5, seed=0)
    pts = site_points(site_table(1))
    x = to_data_scale(b, margins, pts, v_r=3.0)[:, 0]
    expected = margins.ppf(np.exp(-1.0 / (3.0 * b.risks)), pts.take(np.zeros(b.m, int)))
    np.testing.assert_allclose(x, expected, atol=1e-9)


def test_data_scale_monotone_in_risk(margins):
    b = simulate_profiles(VARIO, grid_xy(2), 20, L=5, seed=1)
    pts = site_points(site_table(4))
    lo = to_data_scale(b, margins, pts, 2.0)
    b.risks = b.risks * 1.5
    hi = to_data_scale(b, margins, pts, 2.0)
    assert np.all(hi > lo)
