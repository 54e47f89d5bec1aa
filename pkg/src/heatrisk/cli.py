"""Command-line entry point: ``heatrisk <stage> --config FILE``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

THREAD_ENV = "HEATRISK_THREADS"
_BLAS_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

STAGE_SEED = {
    "chi": "dep.seed",
    "fit-dep": "dep.seed",
    "simulate": "sim.seed",
    "bootstrap": "resample.seed",
    "cv": "cv.seed",
}


def _cap_threads(n):
    # Only effective before the numeric libraries load, hence the lazy imports below.
    if n:
        for v in _BLAS_VARS:
            os.environ[v] = str(n)


def _common(p):
    p.add_argument("--config", "-c", help="flat key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a configuration key")
    p.add_argument("--seed", type=int, help="seed for the stage's random draws")
    p.add_argument("--threads", type=int, help=f"thread cap (default ${THREAD_ENV} or 1)")
    p.add_argument("--verbose", "-v", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="heatrisk", description="Spatial heat-extremes pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    from_stages = [
        ("ingest", "read station, grid and covariate CSVs"),
        ("fit-body", "climate quantiles and the quantile-regression body"),
        ("fit-tail", "climate-grid GPD, threshold and station GPD"),
        ("transform", "station data to the unit-Pareto scale"),
        ("chi", "binned empirical chi over the configured levels"),
        ("fit-dep", "variogram fit and risk threshold"),
        ("simulate", "r-Pareto profiles and risks"),
        ("risk", "event probabilities, coverage and data-scale chi"),
        ("return-levels", "marginal return levels per site"),
        ("bootstrap", "block bootstrap of the station tail with bias correction"),
        ("cv", "cross-validated RMSE and CRPS of body rows and tail models"),
        ("report", "summary JSON of the fitted pipeline"),
    ]
    for name, help_text in from_stages:
        p = sub.add_parser(name, help=help_text)
        _common(p)
        if name == "bootstrap":
            p.add_argument("--n", type=int, help="replicates")
            p.add_argument("--block", type=int, help="block length (days)")
        if name == "cv":
            p.add_argument("--kind", choices=["90", "st", "K90", "ST"], help="fold scheme")
    p = sub.add_parser("run", help="run one stage or the whole pipeline")
    _common(p)
    p.add_argument("stage", nargs="?", default="all")
    p = sub.add_parser("synth", help="write a synthetic dataset with its truth record")
    p.add_argument("--spec", help="JSON SynthSpec (defaults used for missing keys)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--verbose", "-v", action="store_true")
    p = sub.add_parser("config", help="print every configuration key with its default")
    return parser


def _overrides(args):
    out = {}
    for item in args.set:
        if "=" not in item:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    cmd = args.command
    if args.seed is not None:
        keys = list(dict.fromkeys(STAGE_SEED.values())) if cmd == "run" else [STAGE_SEED.get(cmd)]
        for k in keys:
            if k:
                out[k] = str(args.seed)
    if cmd == "bootstrap":
        if args.n is not None:
            out["resample.n"] = str(args.n)
        if args.block is not None:
            out["resample.block"] = str(args.block)
    if cmd == "cv" and args.kind:
        out["cv.kind"] = "K90" if args.kind == "90" else args.kind.upper()
    return out


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    threads = getattr(args, "threads", None) or os.environ.get(THREAD_ENV)
    _cap_threads(threads)

    from .errors import HeatRiskError

    try:
        if args.command == "config":
            from .config import describe

            print(describe())
            return 0
        if args.command == "synth":
            from . import synthkit

            spec = synthkit.load_spec(args.spec) if args.spec else synthkit.SynthSpec()
            if args.seed is not None:
                spec.seed = args.seed
            synthkit.write(synthkit.generate(spec), args.out)
            return 0

        from .config import Config
        from .pipeline import run

        cfg = Config.load(args.config, _overrides(args))
        stage = args.stage if args.command == "run" else args.command
        run(cfg, stage)
    except (HeatRiskError, FileNotFoundError, ValueError) as exc:
        print(f"heatrisk: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
