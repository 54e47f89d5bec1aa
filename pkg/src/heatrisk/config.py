"""Flat ``section.key = value`` pipeline configuration."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .body_model import DEFAULT_TAUS, MODEL_ROWS
from .errors import HeatRiskError
from .tail_model import OBS_MODELS


class ConfigError(HeatRiskError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


def _floats(text):
    return [float(v) for v in str(text).replace(";", ",").split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in str(text).replace(";", ",").split(",") if v.strip()]


def _strs(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text):
    return None if str(text).strip().lower() in ("", "none") else int(text)


@dataclass(frozen=True)
class Key:
    default: object
    parse: object
    doc: str
    check: object = None


def _in(*options):
    return lambda v: v in options


def _pos(v):
    return v > 0


def _prob_list(v):
    return len(v) > 0 and all(0 < p < 1 for p in v)


KEYS = {
    "paths.station": Key("", str, "station CSV (long format)"),
    "paths.grid": Key("", str, "climate-grid CSV (long format)"),
    "paths.covariates": Key("", str, "covariate CSV (year[, day], M_I, ...)"),
    "paths.outdir": Key("out", str, "artifact directory"),
    "data.bbox": Key("", str, "optional crop 'lon0,lat0,lon1,lat1'"),
    "body.taus": Key(",".join(f"{t:g}" for t in DEFAULT_TAUS), _floats, "quantile levels of the body", _prob_list),
    "body.model": Key("clim+mi", str, "body covariate row", _in(*MODEL_ROWS)),
    "tail.tau_u": Key(0.9, float, "threshold quantile level", lambda v: 0.5 < v < 1),
    "tail.model_id": Key("M2", str, "station GPD scale model", _in(*OBS_MODELS)),
    "tail.clim_scale_link": Key("identity", str, "how sigma_c enters M2", _in("identity", "log")),
    "tail.mode": Key("profile", str, "climate GPD alternation", _in("profile", "coordinate")),
    "tail.tol_xi": Key(1e-6, float, "shape tolerance of the climate fit", _pos),
    "tail.tol_ll": Key(1e-9, float, "log-likelihood tolerance of the climate fit", _pos),
    "tail.max_sweeps": Key(200, int, "sweep cap of the climate fit", _pos),
    "dep.p_fit": Key(0.9, float, "chi level used for the fit", lambda v: 0 < v < 1),
    "dep.p_grid": Key("0.8,0.85,0.9", _floats, "chi levels reported", _prob_list),
    "dep.bins": Key(30, int, "distance bins", _pos),
    "dep.boot": Key(500, int, "block-bootstrap replicates for chi", _pos),
    "dep.block": Key(5, int, "chi bootstrap block length (days)", _pos),
    "dep.min_observed": Key(10, int, "sites needed for a valid risk value", _pos),
    "dep.anchor_sites": Key("", _strs, "sites that must be observed for a risk value"),
    "dep.time_varying": Key(False, _bool, "log-linear alpha in M_I"),
    "dep.seed": Key(0, int, "chi bootstrap seed"),
    "sim.m": Key(25000, int, "profiles", _pos),
    "sim.L": Key(300, int, "auxiliary risks", _pos),
    "sim.seed": Key(0, int, "simulation seed"),
    "risk.T": Key("28,30,32,34", _floats, "critical temperatures"),
    "risk.years": Key("", _ints, "years whose covariates define conditions (default: first and last)"),
    "risk.site_set": Key("stations", str, "sites the event is defined on", _in("stations", "grid")),
    "risk.h_grid": Key("0,50,100,200", _floats, "distances for data-scale chi (km)"),
    "risk.h_width": Key(20.0, float, "distance window for data-scale chi (km)", _pos),
    "risk.periods": Key("10,50,100", _floats, "return periods (years)"),
    "resample.block": Key(5, int, "bootstrap block length (days)", lambda v: 0 < v <= 92),
    "resample.n": Key(500, int, "bootstrap replicates", _pos),
    "resample.seed": Key(0, int, "bootstrap seed"),
    "cv.kind": Key("ST", lambda v: str(v).upper(), "fold scheme", _in("K90", "ST")),
    "cv.body_models": Key("base,clim,clim+mi", _strs, "body rows compared", lambda v: set(v) <= set(MODEL_ROWS)),
    "cv.tail_models": Key("M0,M1,M2", _strs, "tail models compared", lambda v: set(v) <= set(OBS_MODELS)),
    "cv.tail_taus": Key("0.95,0.99", _floats, "quantile levels scored for tail models", _prob_list),
    "cv.max_folds": Key("", _opt_int, "score only the first N folds (default all)"),
    "cv.seed": Key(0, int, "fold seed"),
    "run.threads": Key(1, int, "thread cap", _pos),
}

INPUT_PATHS = ("paths.station", "paths.grid", "paths.covariates")
SEED_KEYS = ("dep.seed", "sim.seed", "resample.seed", "cv.seed")


def parse_text(text):
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError([f"line {n}: expected 'key = value'"])
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


class Config:
    """Validated configuration; ``cfg["sim.m"]`` returns the parsed value."""

    def __init__(self, raw=None, base_dir=None):
        self.raw = {k: str(v) for k, v in (raw or {}).items()}
        self.base_dir = Path(base_dir) if base_dir else Path.cwd()
        problems = []
        self.values = {}
        for k in sorted(set(self.raw) - set(KEYS)):
            problems.append(f"{k}: unknown key")
        for k, spec in KEYS.items():
            text = self.raw.get(k, spec.default)
            try:
                v = spec.parse(text)
            except (TypeError, ValueError) as exc:
                problems.append(f"{k}: cannot parse {text!r} ({exc})")
                continue
            if spec.check is not None and not spec.check(v):
                problems.append(f"{k}: value {text!r} out of range ({spec.doc})")
                continue
            self.values[k] = v
        for k in INPUT_PATHS:
            p = self.path(k) if k in self.values else None
            if p is not None and not p.exists():
                problems.append(f"{k}: {p} does not exist")
        if problems:
            raise ConfigError(problems)

    @classmethod
    def load(cls, path=None, overrides=None):
        raw = {}
        base = None
        if path:
            p = Path(path)
            raw = parse_text(p.read_text())
            base = p.parent
        raw.update(overrides or {})
        return cls(raw, base)

    def __getitem__(self, key):
        return self.values[key]

    def path(self, key):
        v = self.values[key]
        if not v:
            return None
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p

    def check_paths(self, keys):
        problems = []
        for k in keys:
            p = self.path(k)
            if p is None:
                problems.append(f"{k}: not set")
            elif not p.exists():
                problems.append(f"{k}: {p} does not exist")
        if problems:
            raise ConfigError(problems)

    def resolved(self):
        """Every key with its effective value, JSON-friendly."""
        return {k: (list(v) if isinstance(v, (list, tuple)) else v) for k, v in sorted(self.values.items())}

    def digest(self):
        return hashlib.sha256(json.dumps(self.resolved(), sort_keys=True).encode()).hexdigest()

    def seeds(self):
        return {k: self.values[k] for k in SEED_KEYS}


def describe():
    """Documented defaults, one ``key = value  # doc`` line each."""
    lines = []
    for k, spec in KEYS.items():
        lines.append(f"{k} = {spec.default}  # {spec.doc}")
    return "\n".join(lines)
