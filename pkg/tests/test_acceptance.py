"""Acceptance criteria, one test each, with a PASS/FAIL line per criterion."""

import time

import numpy as np
import pytest
from scipy.stats import kstest, norm

from heatrisk.body_model import fit_ald, fit_ald_matrix
from heatrisk.config import Config
from heatrisk.covariates import Points, SiteTable, panel_points
from heatrisk.datastore import distance_matrix
from heatrisk.dependence import VariogramParams, chi_brown_resnick, chi_empirical, fit_variogram
from heatrisk.pipeline import Workspace, run
from heatrisk.resample_validate import BootstrapPlan, bias_correct, block_bootstrap, crps_piecewise, make_folds
from heatrisk.risk_engine import expected_coverage, naive_prob_event, prob_event
from heatrisk.simulator import SimBatch, simulate_profiles
from heatrisk.synthkit import SynthSpec, clim_excesses, covariate_gpd_sample, generate, sample_gpd, write
from heatrisk.tail_model import fit_clim_gpd, fit_obs_gpd

from conftest import ACCEPTANCE, make_panel, record_criterion

VARIO = VariogramParams(1.5, 200.0, 1.0)


def _check(label, checks):
    """``checks`` is a list of ``(ok, text)``; records one line and asserts all."""
    ok = all(c for c, _ in checks)
    record_criterion(label, ok, "; ".join(t for _, t in checks))
    assert ok, [t for c, t in checks if not c]


# ---------------------------------------------------------------------------
# 1. single-site GPD recovery


def test_c1_gpd_recovery():
    y = sample_gpd(20_000, 2.0, -0.15, np.random.default_rng(101))
    t0 = time.perf_counter()
    fit = fit_clim_gpd([y])
    elapsed = time.perf_counter() - t0
    sigma, xi = fit.sigma_c[0], fit.xi_c
    _check(
        "C1 GPD recovery",
        [
            (abs(sigma / 2.0 - 1) <= 0.05, f"sigma={sigma:.4f} (truth 2)"),
            (abs(xi + 0.15) <= 0.03, f"xi={xi:.4f} (truth -0.15)"),
            (elapsed < 5.0, f"{elapsed:.2f}s"),
        ],
    )


# ---------------------------------------------------------------------------
# 2. climate fit with shared shape


def test_c2_alternating_climate_fit():
    sig = np.exp(np.random.default_rng(102).uniform(np.log(0.8), np.log(3.0), 50))
    ex = clim_excesses(sig, -0.15, 3000, np.random.default_rng(103))
    fit = fit_clim_gpd(ex)
    rel = np.max(np.abs(fit.sigma_c / sig - 1))
    _check(
        "C2 alternating climate fit",
        [
            (abs(fit.xi_c + 0.15) <= 0.02, f"xi={fit.xi_c:.4f}"),
            (rel <= 0.05, f"max sigma rel err={rel:.4f}"),
            (fit.converged and fit.sweeps <= 200, f"sweeps={fit.sweeps} converged={fit.converged}"),
        ],
    )


# ---------------------------------------------------------------------------
# 3. covariate GPD


def _nested(y, pts):
    m0 = fit_obs_gpd(y, pts, "M0")
    m1 = fit_obs_gpd(y, pts, "M1", start=m0)
    m2 = fit_obs_gpd(y, pts, "M2", "log", start=m1)
    return m0.loglik, m1.loglik, m2.loglik


def test_c3_covariate_gpd():
    truth = np.array([0.2, 1.0, 0.5, -0.15])
    y, pts = covariate_gpd_sample(50_000, truth[:3], truth[3], np.random.default_rng(104))
    fit = fit_obs_gpd(y, pts, "M1")
    est = np.append(fit.theta, fit.xi_o)
    err = np.max(np.abs(est - truth))
    ordered = []
    for seed in range(4):
        ys, ps = covariate_gpd_sample(5000, truth[:3], truth[3], np.random.default_rng(200 + seed))
        ordered.append(_nested(ys, ps))
        rng = np.random.default_rng(300 + seed)
        for _ in range(3):
            idx = rng.integers(0, len(ys), len(ys))
            ordered.append(_nested(ys[idx], ps.take(idx)))
    n_ok = sum(l2 >= l1 >= l0 for l0, l1, l2 in ordered)
    _check(
        "C3 covariate GPD",
        [
            (err <= 0.05, f"(b0,b1,b2,xi)=({', '.join(f'{v:.3f}' for v in est)}) max err={err:.3f}"),
            (n_ok == len(ordered), f"nesting M2>=M1>=M0 on {n_ok}/{len(ordered)} datasets"),
        ],
    )


# ---------------------------------------------------------------------------
# 4. ALD regression


def test_c4_ald_regression():
    z = np.random.default_rng(105).standard_normal(100_000)
    b0 = fit_ald_matrix(z, np.ones((len(z), 1)), 0.5).betas[0]

    rng = np.random.default_rng(106)
    n_sites, n = 40, 40_000
    shift = rng.uniform(-3, 3, n_sites)
    taus = np.array([0.9])
    qc = shift[:, None] + norm.ppf(taus)
    table = SiteTable([f"s{k}" for k in range(n_sites)], taus, qc, qc[:, 0], np.linspace(1, 50, n_sites))
    site = rng.integers(0, n_sites, n)
    mi = rng.uniform(-0.5, 1.0, n)
    planted = np.array([1.0, 0.8, 1.5])
    y = planted[0] + planted[1] * qc[site, 0] + planted[2] * mi + rng.standard_normal(n) - norm.ppf(0.9)
    fit = fit_ald(y, Points(site, table, {"M_I": mi}), 0.9, ["const", "q_c", "M_I"])
    err = np.max(np.abs(fit.betas - planted))
    _check(
        "C4 ALD regression",
        [
            (abs(b0) < 0.02, f"median intercept={b0:.4f}"),
            (err <= 0.05, f"(b0,b1,b2)=({', '.join(f'{v:.3f}' for v in fit.betas)}) max err={err:.3f}"),
        ],
    )


# ---------------------------------------------------------------------------
# 5. composite CDF of a fitted model

CONFIG = """\
paths.station = data/station.csv
paths.grid = data/grid.csv
paths.covariates = data/covariates.csv
paths.outdir = out
"""


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    d = tmp_path_factory.mktemp("c5")
    write(generate(SynthSpec(n_sites=10, grid_shape=(4, 4), n_years=8, seed=11)), d / "data")
    (d / "cfg.txt").write_text(CONFIG)
    cfg = Config.load(d / "cfg.txt")
    for stage in ("ingest", "fit-body", "fit-tail"):
        run(cfg, stage)
    ws = Workspace(cfg)
    _, table = ws.tables()
    pts, _, _, _ = panel_points(ws.station(), table, ws.covariates(), observed_only=False)
    return ws.margins(), pts


def test_c5_composite_cdf(fitted):
    margins, pts = fitted
    u = margins.threshold(pts)
    jump = np.max(np.abs(margins.cdf(u + 1e-12, pts) - margins.cdf(u, pts)))
    left = np.max(np.abs(margins.body.cdf(u, pts) - margins.cdf(u, pts)))
    rng = np.random.default_rng(107)
    sub = pts.take(rng.integers(0, len(pts), 4000))
    p = rng.uniform(0.001, 0.999, len(sub))
    rt = np.max(np.abs(margins.cdf(margins.ppf(p, sub), sub) - p))
    passes = 0
    for seed in range(100):
        r = np.random.default_rng(1000 + seed)
        s = pts.take(r.integers(0, len(pts), 1000))
        x = margins.ppf(r.random(len(s)), s)
        passes += kstest(margins.cdf(x, s), "uniform").pvalue > 0.01
    _check(
        "C5 composite CDF",
        [
            (max(jump, left) < 1e-9, f"continuity gap={max(jump, left):.2e}"),
            (rt < 1e-9, f"round trip={rt:.2e}"),
            (passes >= 95, f"KS pass in {passes}/100 seeds"),
        ],
    )


# ---------------------------------------------------------------------------
# 6-7. Brown-Resnick simulation and dependence recovery

H_TARGETS = (50.0, 100.0, 200.0, 300.0)
H_HALF = 10.0
N_BATCH = 50


@pytest.fixture(scope="module")
def c6_layout():
    return np.random.default_rng(108).uniform(0, 320, (60, 2))


@pytest.fixture(scope="module")
def c6_fields(c6_layout):
    b = simulate_profiles(VARIO, c6_layout, 100_000, L=1, seed=109)
    return b.risks[:, None] * b.profiles


def _binned_chi(Y, xy, p):
    """Pooled chi per target distance with a batch-means MC standard error."""
    v = 1.0 / (1.0 - p)
    E = Y > v
    D = distance_matrix(xy)
    out = []
    for h in H_TARGETS:
        i, j = np.nonzero(np.triu(np.abs(D - h) <= H_HALF, 1))
        truth = float(np.mean(chi_brown_resnick(D[i, j], VARIO)))
        batches = np.array_split(np.arange(len(Y)), N_BATCH)
        est = []
        for g in batches:
            Eg = E[g]
            joint = (Eg[:, i] & Eg[:, j]).sum()
            marg = 0.5 * (Eg[:, i].sum() + Eg[:, j].sum())
            est.append(joint / marg)
        est = np.array(est)
        joint = (E[:, i] & E[:, j]).sum()
        chi = joint / (0.5 * (E[:, i].sum() + E[:, j].sum()))
        out.append((h, len(i), chi, est.std(ddof=1) / np.sqrt(N_BATCH), truth))
    return out


def test_c6_brown_resnick_chi(c6_layout, c6_fields):
    checks = []
    main = _binned_chi(c6_fields, c6_layout, 0.98)
    for h, n, chi, se, truth in main:
        checks.append((n > 0 and abs(chi - truth) <= 3 * se, f"h={h:.0f}: {chi:.4f} vs {truth:.4f} (se {se:.4f}, {n} pairs)"))
    b = simulate_profiles(VARIO, c6_layout, 100_000, L=1, seed=110, ref=0)
    other = _binned_chi(b.risks[:, None] * b.profiles, c6_layout, 0.98)
    for (h, _, c1, s1, _), (_, _, c2, s2, _) in zip(main, other):
        checks.append((abs(c1 - c2) <= 3 * np.hypot(s1, s2), f"ref-site swap h={h:.0f}: {c2:.4f}"))
    _check("C6 Brown-Resnick chi", checks)


def test_c7_dependence_recovery(c6_layout, c6_fields):
    panel = make_panel(c6_fields, scale="pareto")
    cloud = chi_empirical(panel, 0.9, n_bins=30, n_boot=50, xy=c6_layout, seed=111)
    v, _, _ = fit_variogram(cloud)
    rel = {k: getattr(v, k) / getattr(VARIO, k) - 1 for k in ("alpha", "phi", "nu")}
    _check(
        "C7 dependence fit recovery",
        [(abs(r) <= 0.15, f"{k}={getattr(v, k):.4g} ({100 * r:+.1f}%)") for k, r in rel.items()],
    )


# ---------------------------------------------------------------------------
# 8. importance-sampling estimator


def test_c8_importance_estimator():
    rng = np.random.default_rng(112)
    m, L = 10_000, 100
    single = SimBatch(np.zeros((1, 2)), np.ones((m, 1)), 1 / (1 - rng.random(m)), 1 / (1 - rng.random(L)), 0, 0)
    p1 = prob_event(single, np.array([10.0]), v_r=1.0).prob

    xy = np.random.default_rng(113).uniform(0, 300, (10, 2))
    batch = simulate_profiles(VARIO, xy, 20_000, 200, seed=114)
    TP = np.linspace(30, 60, 10)
    v_r = 3.0
    est = prob_event(batch, TP, v_r)
    naive = naive_prob_event(batch, TP, v_r)
    z_naive = abs(est.prob - naive.value) / np.hypot(est.se, naive.se)
    scaled = [prob_event(batch, TP, v_r, b=bp) for bp in (1.0, est.b / 2, est.b)]
    z_scale = max(abs(a.prob - c.prob) / np.hypot(a.se, c.se) for a in scaled for c in scaled if a is not c)
    cov = expected_coverage(batch, TP, v_r)
    gap = abs(cov.e_c.value - cov.e_c_given_a.value * cov.prob.value)
    _check(
        "C8 importance estimator",
        [
            (abs(p1 / 0.1 - 1) <= 0.02, f"single site={p1:.5f}"),
            (z_naive <= 3, f"vs naive {est.prob:.5f}/{naive.value:.5f} ({z_naive:.2f} SE)"),
            (z_scale <= 3, "scaling b'=1,b/2,b: " + ", ".join(f"{s.prob:.4f}" for s in scaled) + f" (max {z_scale:.2f} SE)"),
            (gap < 1e-12, f"coverage identity gap={gap:.1e}"),
        ],
    )


# ---------------------------------------------------------------------------
# 9. resampling and validation


def test_c9_resampling():
    rng = np.random.default_rng(115)
    u = rng.random((92 * 8, 40))
    obs = rng.random(u.shape) > 0.25
    panel = make_panel(u, obs, scale="uniform")
    masks_ok = all(np.array_equal(r.panel.observed, obs) for r in block_bootstrap(panel, BootstrapPlan(5, 20, seed=116)))

    y, pts = covariate_gpd_sample(400, (0.2, 1.0, 0.5), -0.15, np.random.default_rng(117))
    full = fit_obs_gpd(y, pts, "M1")
    boot = []
    r = np.random.default_rng(118)
    for _ in range(100):
        idx = r.integers(0, len(y), len(y))
        boot.append((y[idx], pts.take(idx)))
    fits = [fit_obs_gpd(a, b, "M1") for a, b in boot]

    def refit(i, xi):
        return fit_obs_gpd(boot[i][0], boot[i][1], "M1", xi=xi)

    once = bias_correct(fits, full, refit)
    twice = bias_correct(once.fits, full, refit)
    drift = max(np.max(np.abs(a.theta - b.theta)) for a, b in zip(once.fits, twice.fits))

    levels = np.linspace(0, 1, 1001)
    crps = crps_piecewise(levels[None, :], levels, [0.5])[0]

    xy = rng.uniform(0, 300, (40, 2))
    part_ok = True
    for kind in ("K90", "ST"):
        f = make_folds(panel, kind, xy=xy, seed=119)
        count = np.zeros(obs.shape, dtype=int)
        for _, held in f.masks():
            count += held
        part_ok &= np.array_equal(count, obs.astype(int))
    _check(
        "C9 resampling",
        [
            (masks_ok, "bootstrap masks identical"),
            (abs(twice.shift) < 1e-12 and drift < 1e-6, f"bias correction idempotent (shift {twice.shift:.1e}, drift {drift:.1e})"),
            (abs(crps - 1 / 12) < 1e-4, f"uniform CRPS={crps:.6f}"),
            (part_ok, "K90 and ST folds partition observed entries"),
        ],
    )


# ---------------------------------------------------------------------------
# 10. real-archive reproduction


def test_c10_real_archive():
    line = "SKIP C10 real-archive reproduction: station, reanalysis and covariate exports are not bundled"
    ACCEPTANCE.append(line)
    pytest.skip(line)
