import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatrisk.datastore import (
    ClimateGrid,
    CovariateSeries,
    Projection,
    SiteMeta,
    distance_matrix,
    empirical_quantiles,
    june_first,
    load_covariates,
    load_panel,
    load_panel_dir,
    nearest_sites,
    save_covariates,
    save_panel,
    save_panel_dir,
    summer_filter,
)
from heatrisk.errors import ConflictError, ParseError, SchemaError

from conftest import make_panel

HEADER = "site_id,lon,lat,coast_dist,year,day,value\n"


def write(tmp_path, text, name="p.csv"):
    p = tmp_path / name
    p.write_text(HEADER + text)
    return p


def test_blank_value_sets_mask(tmp_path):
    p = write(tmp_path, "a,0,0,1,2000,160,1.5\na,0,0,1,2000,161,2.5\na,0,0,1,2000,162,\n")
    panel = load_panel(p)
    assert panel.observed[:, 0].tolist() == [True, True, False]
    assert np.isnan(panel.values[2, 0])


def test_grid_blank_is_schema_error(tmp_path):
    p = write(tmp_path, "g,0,0,1,2000,160,1\ng,0,0,1,2000,161,\n")
    with pytest.raises(SchemaError):
        load_panel(p, "grid")


def test_grid_incomplete_is_schema_error(tmp_path):
    p = write(tmp_path, "g,0,0,1,2000,160,1\ng,0,0,1,2000,161,2\nh,1,0,1,2000,160,3\n")
    with pytest.raises(SchemaError):
        load_panel(p, "grid")


def test_duplicate_rows_conflict(tmp_path):
    p = write(tmp_path, "a,0,0,1,2000,160,1\na,0,0,1,2000,160,2\n")
    with pytest.raises(ConflictError):
        load_panel(p)


def test_inconsistent_site_metadata_conflict(tmp_path):
    p = write(tmp_path, "a,0,0,1,2000,160,1\na,0,1,1,2000,161,2\n")
    with pytest.raises(ConflictError):
        load_panel(p)


def test_parse_error_reports_line(tmp_path):
    p = write(tmp_path, "a,0,0,1,2000,160,1\na,0,0,1,2000,161,abc\n")
    with pytest.raises(ParseError, match="line 3"):
        load_panel(p)


def test_coast_distance_must_be_positive():
    with pytest.raises(SchemaError):
        SiteMeta("a", 0, 0, 0.0)


def _year_csv(tmp_path, year, blank_day=None):
    rows = []
    n_days = 366 if year % 4 == 0 else 365
    for d in range(1, n_days + 1):
        v = "" if d == blank_day else f"{d * 0.1:.1f}"
        rows.append(f"a,0,0,1,{year},{d},{v}")
    return write(tmp_path, "\n".join(rows) + "\n", f"y{year}.csv")


@pytest.mark.parametrize("year", [2001, 2004])
def test_summer_filter_keeps_92_days(tmp_path, year):
    panel = summer_filter(load_panel(_year_csv(tmp_path, year)))
    assert panel.n_times == 92
    assert panel.day.min() == 0 and panel.day.max() == 91
    assert not panel.calendar


def test_summer_filter_drops_unobserved_rows(tmp_path):
    blank = june_first(2001) + 10
    panel = summer_filter(load_panel(_year_csv(tmp_path, 2001, blank_day=blank)))
    assert panel.n_times == 91
    assert 10 not in panel.day.tolist()


def test_empirical_quantiles_examples():
    vals = np.arange(1, 101, dtype=float)[:, None]
    panel = make_panel(np.hstack([vals, np.full_like(vals, 7.0)]))
    q = empirical_quantiles(panel, [0.1, 0.5, 0.9])
    assert q[0, 1] == pytest.approx(50.5)
    np.testing.assert_allclose(q[1], 7.0)


def test_empirical_quantiles_uniform_mc():
    rng = np.random.default_rng(11)
    panel = make_panel(rng.random((5152, 1)))
    q = empirical_quantiles(panel, [0.9])
    assert abs(q[0, 0] - 0.9) < 0.02


def test_empirical_quantiles_validates_taus():
    panel = make_panel(np.ones((5, 1)))
    for bad in ([0.005], [0.5, 0.4], [0.995]):
        with pytest.raises(ValueError):
            empirical_quantiles(panel, bad)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=3, max_size=40), st.lists(st.floats(0.01, 0.99), min_size=1, max_size=8, unique=True))
def test_empirical_quantiles_monotone(values, taus):
    panel = make_panel(np.asarray(values)[:, None])
    q = empirical_quantiles(panel, sorted(taus))
    assert np.all(np.diff(q[0]) >= -1e-12)


def test_round_trip_csv(tmp_path):
    rng = np.random.default_rng(0)
    text = []
    for s in ("a", "b"):
        for d in range(160, 170):
            v = "" if rng.random() < 0.2 else f"{rng.normal(20, 3):.6f}"
            text.append(f"{s},{0 if s == 'a' else 1},0,{2 if s == 'a' else 3},2010,{d},{v}")
    p = write(tmp_path, "\n".join(text) + "\n")
    panel = load_panel(p)
    out = tmp_path / "out.csv"
    save_panel(panel, out)
    a = pd.read_csv(p).sort_values(["site_id", "year", "day"]).reset_index(drop=True)
    b = pd.read_csv(out).sort_values(["site_id", "year", "day"]).reset_index(drop=True)
    pd.testing.assert_frame_equal(a, b, check_dtype=False)
    assert panel.observed.sum() == np.isfinite(panel.values).sum()


def test_panel_dir_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    vals = rng.normal(size=(30, 3))
    obs = rng.random((30, 3)) > 0.3
    panel = make_panel(vals, obs, scale="pareto")
    save_panel_dir(panel, tmp_path / "p")
    back = load_panel_dir(tmp_path / "p")
    assert back.scale == "pareto"
    np.testing.assert_array_equal(back.observed, panel.observed)
    np.testing.assert_array_equal(back.values[obs], panel.values[obs])


def test_climate_grid_rejects_missing_and_irregular():
    sites = [SiteMeta("g0", 0.0, 0.0, 1, "grid"), SiteMeta("g1", 1.0, 0.0, 1, "grid"), SiteMeta("g2", 2.5, 0.0, 1, "grid")]
    with pytest.raises(SchemaError):
        ClimateGrid(sites, [2000], [0], np.ones((1, 3)), np.ones((1, 3), bool))
    sites[2] = SiteMeta("g2", 2.0, 0.0, 1, "grid")
    with pytest.raises(SchemaError):
        ClimateGrid(sites, [2000], [0], np.ones((1, 3)), np.array([[True, False, True]]))


def test_covariates_align_annual_and_daily(tmp_path):
    covs = CovariateSeries([2000, 2001], None, {"M_I": [0.1, 0.3]})
    out = covs.align([2001, 2000, 2001], [5, 0, 91])
    np.testing.assert_allclose(out["M_I"], [0.3, 0.1, 0.3])
    assert covs.at_year(2001) == {"M_I": 0.3}
    with pytest.raises(SchemaError):
        covs.align([1999], [0])
    daily = CovariateSeries([2000, 2000], [0, 1], {"M_I": [1.0, 2.0]})
    save_covariates(daily, tmp_path / "c.csv")
    back = load_covariates(tmp_path / "c.csv")
    np.testing.assert_array_equal(back.day, [0, 1])
    assert back.at_year(2000)["M_I"] == pytest.approx(1.5)


def test_projection_and_neighbours():
    proj = Projection(0.0, 53.0)
    xy = proj(np.array([[0.0, 53.0], [0.0, 54.0], [1.0, 53.0]]))
    assert xy[1, 1] == pytest.approx(111.19, rel=1e-3)
    assert xy[2, 0] == pytest.approx(111.19 * np.cos(np.radians(53.0)), rel=1e-3)
    D = distance_matrix(xy)
    assert D[0, 1] == pytest.approx(xy[1, 1])
    np.testing.assert_array_equal(nearest_sites(xy + 1.0, xy), [0, 1, 2])
