"""Pipeline stages, artifacts and the provenance manifest.

Each stage reads upstream artifacts from the output directory, writes its
own, and records their sha256 digests in ``manifest.json``.  Numeric CSVs
use a fixed column order and 9 significant digits.
"""

from __future__ import annotations

import hashlib
import json
import logging
import platform
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .body_model import MODEL_ROWS, BodyModel, build_body, fit_ald
from .config import INPUT_PATHS, Config
from .covariates import Points, SiteTable, map_sites, panel_points, site_points
from .datastore import (
    Projection,
    distance_matrix,
    empirical_quantiles,
    load_covariates,
    load_panel,
    load_panel_dir,
    nearest_sites,
    parse_bbox,
    save_covariates,
    save_panel_dir,
    summer_filter,
)
from .dependence import DependenceModel, chi_brown_resnick, chi_empirical, fit_dependence
from .errors import CrossingError, StageError
from .margins import MarginalModel, to_pareto, to_uniform, uniform_panel_to_data
from .resample_validate import BootstrapPlan, bias_correct, block_bootstrap, cross_validate, make_folds
from .risk_engine import (
    BelowThresholdError,
    chi_data_scale,
    expected_coverage,
    marginal_return_level,
    prob_event,
    return_period,
    threshold_on_pareto,
)
from .simulator import load_batch, save_batch, simulate_profiles
from .tail_model import (
    ClimTailFit,
    TailModel,
    fit_clim_gpd,
    fit_obs_gpd,
    fit_threshold,
    grid_excesses,
    obs_excesses,
)

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.9g"

STAGES = ["ingest", "fit-body", "fit-tail", "transform", "chi", "fit-dep", "simulate", "risk", "return-levels", "bootstrap", "cv", "report"]

# artifact -> producing stage
PRODUCER = {
    "station": "ingest",
    "grid": "ingest",
    "covariates.csv": "ingest",
    "body.json": "fit-body",
    "clim_quantiles.csv": "fit-body",
    "clim_gpd.json": "fit-tail",
    "tail.json": "fit-tail",
    "pareto": "transform",
    "chi.csv": "chi",
    "dependence.json": "fit-dep",
    "chi_fit.csv": "fit-dep",
    "sim": "simulate",
    "risk.csv": "risk",
    "chi_data.csv": "risk",
    "return_levels.csv": "return-levels",
    "bootstrap_xi.csv": "bootstrap",
    "report.json": "report",
}


def write_csv(frame, path):
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="NaN", lineterminator="\n")


def sha256(path):
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    for f in files:
        if p.is_dir():
            h.update(str(f.relative_to(p)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def versions():
    return {
        "heatrisk": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


class Workspace:
    """Artifact directory bound to a configuration."""

    def __init__(self, cfg: Config):
        self.cfg = cfg
        self.out = cfg.path("paths.outdir") or Path("out")
        self.out.mkdir(parents=True, exist_ok=True)
        self._cache = {}

    def path(self, name):
        return self.out / name

    def require(self, stage, *names):
        for name in names:
            if not self.path(name).exists():
                raise StageError(f"stage {stage!r} requires stage {PRODUCER[name]} (missing {self.path(name)})")

    # -- manifest ---------------------------------------------------------
    def record(self, stage, outputs, extra=None):
        mpath = self.path("manifest.json")
        man = json.loads(mpath.read_text()) if mpath.exists() else {}
        man["config_hash"] = self.cfg.digest()
        man["config"] = self.cfg.resolved()
        man["seeds"] = self.cfg.seeds()
        man["versions"] = versions()
        stages = man.setdefault("stages", {})
        entry = {"outputs": {n: sha256(self.path(n)) for n in outputs}}
        if extra:
            entry.update(extra)
        stages[stage] = entry
        mpath.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")

    # -- loaders ----------------------------------------------------------
    def station(self):
        if "station" not in self._cache:
            self._cache["station"] = load_panel_dir(self.path("station"))
        return self._cache["station"]

    def grid(self):
        if "grid" not in self._cache:
            self._cache["grid"] = load_panel_dir(self.path("grid"))
        return self._cache["grid"]

    def covariates(self):
        if "covs" not in self._cache:
            self._cache["covs"] = load_covariates(self.path("covariates.csv"))
        return self._cache["covs"]

    def projection(self):
        return Projection.about(self.station().sites, self.grid().sites)

    def quantile_levels(self):
        return sorted(set(float(t) for t in self.cfg["body.taus"]) | {self.cfg["tail.tau_u"]})

    def tables(self, with_sigma=True):
        """``(grid_table, station_table)`` from the stored climate quantiles."""
        grid, station = self.grid(), self.station()
        frame = pd.read_csv(self.path("clim_quantiles.csv"), dtype={"site_id": str}, float_precision="round_trip")
        levels = [float(c[2:]) for c in frame.columns if c.startswith("q_")]
        qc = frame[[c for c in frame.columns if c.startswith("q_")]].to_numpy(dtype=float)
        tau_u = self.cfg["tail.tau_u"]
        iu = int(np.argmin(np.abs(np.array(levels) - tau_u)))
        sigma = None
        if with_sigma and self.path("clim_gpd.json").exists():
            sigma = ClimTailFit.from_dict(json.loads(self.path("clim_gpd.json").read_text())).sigma_c
        gt = SiteTable(grid.site_ids, levels, qc, qc[:, iu], grid.coast_dist, sigma)
        proj = self.projection()
        near = nearest_sites(proj(station.lonlat), proj(grid.lonlat))
        return gt, map_sites(gt, near, station.site_ids, station.coast_dist)

    def margins(self):
        body = BodyModel.from_dict(json.loads(self.path("body.json").read_text()))
        tail = TailModel.from_dict(json.loads(self.path("tail.json").read_text())["model"])
        return MarginalModel(body, tail)

    def dependence(self):
        return DependenceModel.from_dict(json.loads(self.path("dependence.json").read_text()))

    def event_sites(self):
        """``(table, xy)`` of the site set events are defined on."""
        gt, st = self.tables()
        proj = self.projection()
        if self.cfg["risk.site_set"] == "grid":
            return gt, proj(self.grid().lonlat)
        return st, proj(self.station().lonlat)

    def years(self):
        ys = self.cfg["risk.years"]
        if ys:
            return list(ys)
        yr = np.unique(self.station().year)
        return sorted({int(yr[0]), int(yr[-1])})


# ---------------------------------------------------------------------------
# Stages


def stage_ingest(ws):
    cfg = ws.cfg
    cfg.check_paths(INPUT_PATHS)
    bbox = parse_bbox(cfg["data.bbox"]) if cfg["data.bbox"] else None
    station = summer_filter(load_panel(cfg.path("paths.station"), "station", bbox))
    grid = summer_filter(load_panel(cfg.path("paths.grid"), "grid", bbox))
    covs = load_covariates(cfg.path("paths.covariates"))
    covs.align(station.year, station.day)
    save_panel_dir(station, ws.path("station"), FLOAT_FORMAT)
    save_panel_dir(grid, ws.path("grid"), FLOAT_FORMAT)
    save_covariates(covs, ws.path("covariates.csv"), FLOAT_FORMAT)
    logger.info("ingested %d station sites x %d days, %d grid cells", station.n_sites, station.n_times, grid.n_sites)
    ws.record("ingest", ["station", "grid", "covariates.csv"])


def _body_fits(y, points, taus, terms):
    return [fit_ald(y, points, float(t), list(terms)) for t in taus]


def fit_body_model(y, points, taus, terms, strict=True):
    fits = _body_fits(y, points, taus, terms)
    try:
        return build_body(fits, points)
    except CrossingError:
        if strict:
            raise
        logger.warning("quantile crossing in a refit; rearranging at evaluation")
        return build_body(fits)


def stage_fit_body(ws):
    ws.require("fit-body", "station", "grid", "covariates.csv")
    grid = ws.grid()
    levels = ws.quantile_levels()
    qc = empirical_quantiles(grid, levels)
    frame = pd.DataFrame(qc, columns=[f"q_{t:g}" for t in levels])
    frame.insert(0, "site_id", grid.site_ids)
    write_csv(frame, ws.path("clim_quantiles.csv"))
    _, table = ws.tables(with_sigma=False)
    points, y, _, _ = panel_points(ws.station(), table, ws.covariates())
    body = fit_body_model(y, points, ws.cfg["body.taus"], MODEL_ROWS[ws.cfg["body.model"]])
    ws.path("body.json").write_text(json.dumps(body.to_dict(), indent=2, sort_keys=True) + "\n")
    ws.record("fit-body", ["clim_quantiles.csv", "body.json"])


def stage_fit_tail(ws):
    ws.require("fit-tail", "body.json", "clim_quantiles.csv")
    cfg = ws.cfg
    gt, _ = ws.tables(with_sigma=False)
    clim = fit_clim_gpd(
        grid_excesses(ws.grid(), gt.u_c),
        tol_xi=cfg["tail.tol_xi"],
        tol_ll=cfg["tail.tol_ll"],
        max_sweeps=cfg["tail.max_sweeps"],
        mode=cfg["tail.mode"],
    )
    ws.path("clim_gpd.json").write_text(json.dumps(clim.to_dict(), indent=2, sort_keys=True) + "\n")
    _, table = ws.tables()
    points, y, _, _ = panel_points(ws.station(), table, ws.covariates())
    threshold = fit_threshold(y, points, cfg["tail.tau_u"])
    ex, ex_pts = obs_excesses(y, points, threshold)
    link = cfg["tail.clim_scale_link"]
    nested, prev = {}, None
    for mid in ("M0", "M1", "M2"):
        prev = fit_obs_gpd(ex, ex_pts, mid, link, start=prev)
        nested[mid] = prev
    chosen = nested[cfg["tail.model_id"]]
    out = {
        "model": TailModel(threshold, chosen).to_dict(),
        "loglik": {k: v.loglik for k, v in nested.items()},
        "xi": {k: v.xi_o for k, v in nested.items()},
        "n_excess": int(len(ex)),
    }
    ws.path("tail.json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    logger.info("tail %s: xi=%.4f from %d excesses (climate xi=%.4f)", chosen.model_id, chosen.xi_o, len(ex), clim.xi_c)
    ws.record("fit-tail", ["clim_gpd.json", "tail.json"], {"clim_converged": clim.converged, "clim_sweeps": clim.sweeps})


def stage_transform(ws):
    ws.require("transform", "body.json", "tail.json", "clim_gpd.json")
    _, table = ws.tables()
    std = to_pareto(ws.station(), ws.margins(), table, ws.covariates())
    save_panel_dir(std, ws.path("pareto"), FLOAT_FORMAT)
    ws.record("transform", ["pareto"])


def _pareto(ws, stage):
    ws.require(stage, "pareto")
    return load_panel_dir(ws.path("pareto"))


def stage_chi(ws):
    std = _pareto(ws, "chi")
    cfg = ws.cfg
    xy = ws.projection()(std.lonlat)
    frames = []
    for k, p in enumerate(cfg["dep.p_grid"]):
        cloud = chi_empirical(std, p, cfg["dep.bins"], cfg["dep.boot"], xy, cfg["dep.seed"] + k, cfg["dep.block"])
        t = pd.DataFrame(cloud.bin_table())
        t.insert(0, "p", p)
        frames.append(t)
    write_csv(pd.concat(frames, ignore_index=True), ws.path("chi.csv"))
    ws.record("chi", ["chi.csv"])


def stage_fit_dep(ws):
    std = _pareto(ws, "fit-dep")
    cfg = ws.cfg
    xy = ws.projection()(std.lonlat)
    cloud = chi_empirical(std, cfg["dep.p_fit"], cfg["dep.bins"], cfg["dep.boot"], xy, cfg["dep.seed"], cfg["dep.block"])
    tcov = None
    if cfg["dep.time_varying"]:
        tcov = ws.covariates().align(std.year, std.day)["M_I"]
    dep = fit_dependence(
        std,
        xy,
        p_fit=cfg["dep.p_fit"],
        n_bins=cfg["dep.bins"],
        n_boot=cfg["dep.boot"],
        seed=cfg["dep.seed"],
        block_length=cfg["dep.block"],
        min_observed=min(cfg["dep.min_observed"], std.n_sites),
        anchor_sites=cfg["dep.anchor_sites"] or None,
        time_covariate=tcov,
        cloud=cloud,
    )
    ws.path("dependence.json").write_text(json.dumps(dep.to_dict(), indent=2, sort_keys=True) + "\n")
    t = pd.DataFrame(cloud.bin_table())
    t["chi_model"] = chi_brown_resnick(t["h"].to_numpy(), dep.vario)
    write_csv(t, ws.path("chi_fit.csv"))
    ws.record("fit-dep", ["dependence.json", "chi_fit.csv"])


def stage_simulate(ws):
    ws.require("simulate", "dependence.json", "clim_quantiles.csv")
    cfg = ws.cfg
    dep = ws.dependence()
    _, xy = ws.event_sites()
    batch = simulate_profiles(dep.vario, xy, cfg["sim.m"], cfg["sim.L"], seed=cfg["sim.seed"])
    save_batch(batch, ws.path("sim"), FLOAT_FORMAT)
    ws.record("simulate", ["sim"], {"ref_site": batch.ref_site})


def stage_risk(ws):
    ws.require("risk", "dependence.json", "body.json", "tail.json")
    ws.require("risk", "sim")
    cfg = ws.cfg
    dep = ws.dependence()
    batch = load_batch(ws.path("sim"))
    margins = ws.margins()
    table, xy = ws.event_sites()
    D = distance_matrix(xy)
    covs = ws.covariates()
    rows, chi_rows = [], []
    for year in ws.years():
        pts = site_points(table, covs.at_year(year))
        for T in cfg["risk.T"]:
            TP = threshold_on_pareto(T, margins, pts, check_threshold=False)
            est = prob_event(batch, TP, dep.v_r)
            cov = expected_coverage(batch, TP, dep.v_r)
            rows.append(
                {
                    "year": year,
                    "T": T,
                    "Pr": est.prob,
                    "return_period": return_period(est.prob),
                    "SE": est.se,
                    "E_C": cov.e_c.value,
                    "E_C_given_A": cov.e_c_given_a.value,
                    "b": est.b,
                    "scaled": int(est.scaled),
                }
            )
            cd = chi_data_scale(batch, TP, dep.v_r, D, cfg["risk.h_grid"], cfg["risk.h_width"])
            for h, c, u, n in zip(cd.h, cd.conditional, cd.unconditional, cd.n_pairs):
                chi_rows.append({"year": year, "T": T, "h": h, "chi_conditional": c, "chi_unconditional": u, "n_pairs": n})
    write_csv(pd.DataFrame(rows), ws.path("risk.csv"))
    write_csv(pd.DataFrame(chi_rows), ws.path("chi_data.csv"))
    ws.record("risk", ["risk.csv", "chi_data.csv"])


def stage_return_levels(ws):
    ws.require("return-levels", "body.json", "tail.json", "clim_gpd.json")
    margins = ws.margins()
    table, _ = ws.event_sites()
    covs = ws.covariates()
    rows = []
    for year in ws.years():
        pts = site_points(table, covs.at_year(year))
        for period in ws.cfg["risk.periods"]:
            try:
                level = marginal_return_level(margins, pts, period)
            except BelowThresholdError as exc:
                logger.warning("%s", exc)
                level = np.full(len(pts), np.nan)
            for sid, v in zip(table.site_ids, level):
                rows.append({"site_id": sid, "year": year, "period": period, "level": v})
    write_csv(pd.DataFrame(rows), ws.path("return_levels.csv"))
    ws.record("return-levels", ["return_levels.csv"])


def stage_bootstrap(ws):
    """Station GPD refits on block-bootstrap replicates, then shape bias correction.

    The body and threshold stay at their full-data fits; each replicate is
    back-transformed through the fitted margins and its excesses refitted.
    """
    ws.require("bootstrap", "body.json", "tail.json", "clim_gpd.json")
    cfg = ws.cfg
    margins = ws.margins()
    _, table = ws.tables()
    covs = ws.covariates()
    station = ws.station()
    uni = to_uniform(station, margins, table, covs)
    full = margins.tail.obs_fit
    plan = BootstrapPlan(cfg["resample.block"], cfg["resample.n"], cfg["resample.seed"])
    fits, data, fills = [], [], []
    for rep in block_bootstrap(uni, plan):
        panel = uniform_panel_to_data(rep.panel, margins, table, covs)
        pts, y, _, _ = panel_points(panel, table, covs)
        ex, ex_pts = obs_excesses(y, pts, margins.tail.threshold)
        fits.append(fit_obs_gpd(ex, ex_pts, full.model_id, full.clim_scale_link))
        data.append((ex, ex_pts))
        fills.append((rep.n_filled_other, rep.n_filled_uniform))
    frame = pd.DataFrame({"replicate": np.arange(len(fits)), "xi": [f.xi_o for f in fits]})
    corrected = None
    if len(fits) >= 100:

        def refit(i, xi):
            ex, ex_pts = data[i]
            return fit_obs_gpd(ex, ex_pts, full.model_id, full.clim_scale_link, xi=xi, start=fits[i])

        corrected = bias_correct(fits, full, refit)
        keep = [i for i in range(len(fits)) if i not in set(corrected.dropped)]
        xi_c = np.full(len(fits), np.nan)
        xi_c[keep] = [f.xi_o for f in corrected.fits]
        frame["xi_corrected"] = xi_c
    else:
        logger.warning("bias correction needs >= 100 replicates; only raw shapes reported")
        frame["xi_corrected"] = np.nan
    for k, name in enumerate(full.covariate_spec):
        frame[f"theta_{name}"] = [f.theta[k] for f in fits]
    frame["filled_other"] = [a for a, _ in fills]
    frame["filled_uniform"] = [b for _, b in fills]
    write_csv(frame, ws.path("bootstrap_xi.csv"))
    extra = {"xi_full": full.xi_o, "shift": None if corrected is None else corrected.shift}
    ws.record("bootstrap", ["bootstrap_xi.csv"], extra)


def stage_cv(ws):
    """Body rows and tail models scored by cross-validation (RMSE and CRPS)."""
    ws.require("cv", "body.json", "tail.json", "clim_gpd.json")
    cfg = ws.cfg
    margins = ws.margins()
    _, table = ws.tables()
    covs = ws.covariates()
    station = ws.station()
    xy = ws.projection()(station.lonlat)
    kind = cfg["cv.kind"]
    folds = make_folds(station, kind, xy=xy, seed=cfg["cv.seed"])
    aligned = covs.align(station.year, station.day)

    def points_for(rows, cols):
        return Points(cols, table, {k: v[rows] for k, v in aligned.items()})

    def train_data(train):
        rows, cols = np.nonzero(train)
        return points_for(rows, cols), station.values[rows, cols]

    taus = cfg["body.taus"]
    out = []
    for row in cfg["cv.body_models"]:

        def fit(train, terms=MODEL_ROWS[row]):
            pts, y = train_data(train)
            return MarginalModel(fit_body_model(y, pts, taus, terms, strict=False), margins.tail)

        s = cross_validate(station, folds, fit, points_for, taus, max_folds=cfg["cv.max_folds"])
        out.append({"part": "body", "model": row, "rmse": s.rmse, "crps": s.crps, "n_quantile": s.n_quantile, "n_crps": s.n_crps})

    def above(m, pts, vals):
        return vals > m.threshold(pts)

    link = cfg["tail.clim_scale_link"]
    for mid in cfg["cv.tail_models"]:

        def fit(train, mid=mid):
            pts, y = train_data(train)
            ex, ex_pts = obs_excesses(y, pts, margins.tail.threshold)
            obs = fit_obs_gpd(ex, ex_pts, mid, link)
            return MarginalModel(margins.body, TailModel(margins.tail.threshold, obs))

        s = cross_validate(station, folds, fit, points_for, cfg["cv.tail_taus"], crps_filter=above, max_folds=cfg["cv.max_folds"])
        out.append({"part": "tail", "model": mid, "rmse": s.rmse, "crps": s.crps, "n_quantile": s.n_quantile, "n_crps": s.n_crps})
    name = f"cv_{kind.lower()}.csv"
    write_csv(pd.DataFrame(out), ws.path(name))
    ws.record("cv", [name])


def stage_report(ws):
    ws.require("report", "tail.json")
    rep = {}
    tail = json.loads(ws.path("tail.json").read_text())
    rep["tail"] = {"xi": tail["xi"], "loglik": tail["loglik"], "n_excess": tail["n_excess"]}
    if ws.path("clim_gpd.json").exists():
        clim = json.loads(ws.path("clim_gpd.json").read_text())
        rep["clim"] = {"xi_c": clim["xi_c"], "sweeps": clim["sweeps"], "converged": clim["converged"]}
    if ws.path("dependence.json").exists():
        dep = json.loads(ws.path("dependence.json").read_text())
        rep["dependence"] = {"vario": dep["vario"], "v_r": dep["v_r"], "oversmooth": dep["oversmooth"]}
    if ws.path("risk.csv").exists():
        rep["risk"] = pd.read_csv(ws.path("risk.csv")).to_dict(orient="records")
    if ws.path("bootstrap_xi.csv").exists():
        b = pd.read_csv(ws.path("bootstrap_xi.csv"))
        col = "xi_corrected" if b["xi_corrected"].notna().any() else "xi"
        rep["bootstrap"] = {"n": int(len(b)), "xi_ci": [float(b[col].quantile(0.025)), float(b[col].quantile(0.975))], "column": col}
    for p in sorted(ws.out.glob("cv_*.csv")):
        rep[p.stem] = pd.read_csv(p).to_dict(orient="records")
    ws.path("report.json").write_text(json.dumps(rep, indent=2, sort_keys=True, default=float) + "\n")
    ws.record("report", ["report.json"])


STAGE_FUNCS = {
    "ingest": stage_ingest,
    "fit-body": stage_fit_body,
    "fit-tail": stage_fit_tail,
    "transform": stage_transform,
    "chi": stage_chi,
    "fit-dep": stage_fit_dep,
    "simulate": stage_simulate,
    "risk": stage_risk,
    "return-levels": stage_return_levels,
    "bootstrap": stage_bootstrap,
    "cv": stage_cv,
    "report": stage_report,
}


def run(cfg, stage="all"):
    ws = Workspace(cfg)
    todo = STAGES if stage == "all" else [stage]
    for name in todo:
        if name not in STAGE_FUNCS:
            raise ValueError(f"unknown stage {name!r}")
        logger.info("stage %s", name)
        STAGE_FUNCS[name](ws)
    return ws
