"""Declarative scenarios: config loading, the run pipeline, verification and reports.

A scenario is a JSON document naming a model metric, a twist class, an
optional synthetic curvature weight, the lattice, the epsilon schedule and
solver options. Field-valued parameters are trigonometric polynomials::

    {"constant": 0.0,
     "terms": [{"kind": "cos", "coef": 0.15, "k": [1, 1]}]}

meaning ``constant + sum coef * cos(2 pi sum_j k_j x_j / L_j)``, with one
integer per real axis in the order ``(x1, y1, x2, y2)``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import platform
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__, grid
from . import continuity as ma
from . import geometry as geo
from . import kw
from .grid import Lattice

logger = logging.getLogger(__name__)

MODELS = ("flat_torus", "conformal_torus", "product", "potential_metric")
FACTOR_MODELS = ("flat_torus", "conformal_torus")
# written by verify/report after a run; not covered by the manifest
DERIVED_FILES = ("verify.json", "summary.json", "plot.csv")
SWEEP_COLUMNS = (
    "epsilon", "sup_u", "inf_u", "residual_sup", "newton_iterations",
    "mass", "cohomological_mass", "min_trace_margin", "lambda_min_global", "mbar_eps",
)
PLOT_COLUMNS = ("epsilon", "mass", "cohomological_mass", "sup_u", "inf_T")
DEFAULT_RESOLUTION = {1: 64, 2: 16}
TOP_KEYS = {"model", "n", "twist", "synthetic_M", "lattice", "schedule", "solver", "classification", "output", "seed"}


class ScenarioError(ValueError):
    """Invalid scenario configuration."""


# --- field specs ---------------------------------------------------------------------


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"{where}: expected a number, got {value!r}")
    if not math.isfinite(value):
        raise ScenarioError(f"{where}: non-finite value")
    return float(value)


def _check_keys(obj: dict, allowed, where: str):
    if not isinstance(obj, dict):
        raise ScenarioError(f"{where}: expected an object, got {obj!r}")
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ScenarioError(f"{where}: unknown keys {sorted(unknown)}")


def normalize_field_spec(spec, ndim: int, where: str = "field") -> dict:
    """Canonical form ``{"constant": c, "terms": [...]}`` of a field spec."""
    if spec is None:
        return {"constant": 0.0, "terms": []}
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        return {"constant": _number(spec, where), "terms": []}
    _check_keys(spec, {"constant", "terms"}, where)
    terms = []
    for i, term in enumerate(spec.get("terms", [])):
        tw = f"{where}.terms[{i}]"
        _check_keys(term, {"kind", "coef", "k"}, tw)
        kind = term.get("kind", "cos")
        if kind not in ("cos", "sin"):
            raise ScenarioError(f"{tw}: kind must be 'cos' or 'sin', got {kind!r}")
        k = term.get("k")
        if not isinstance(k, list) or len(k) != ndim or any(isinstance(x, bool) or not isinstance(x, int) for x in k):
            raise ScenarioError(f"{tw}: k must be a list of {ndim} integers")
        terms.append({"kind": kind, "coef": _number(term.get("coef", 1.0), tw + ".coef"), "k": list(k)})
    return {"constant": _number(spec.get("constant", 0.0), where + ".constant"), "terms": terms}


def evaluate_field(lattice: Lattice, spec: dict) -> np.ndarray:
    """Evaluate a canonical field spec at the lattice nodes."""
    coords = lattice.coords()
    out = np.full(lattice.shape, float(spec["constant"]))
    for term in spec["terms"]:
        phase = sum(2 * np.pi * k * x / L for k, x, L in zip(term["k"], coords, lattice.periods) if k)
        phase = phase if isinstance(phase, np.ndarray) else np.zeros(lattice.shape)
        out = out + term["coef"] * (np.cos(phase) if term["kind"] == "cos" else np.sin(phase))
    return out


# --- config ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioConfig:
    model: dict
    n: int
    twist: dict
    synthetic_M: dict | None
    lattice: dict
    schedule: list
    solver: dict
    output: str | None
    seed: int
    classification: dict | None = None

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "n": self.n,
            "twist": self.twist,
            "synthetic_M": self.synthetic_M,
            "lattice": self.lattice,
            "schedule": self.schedule,
            "solver": self.solver,
            "classification": self.classification,
            "output": self.output,
            "seed": self.seed,
        }

    def serialize(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()

    def solver_options(self) -> ma.SolverOptions:
        return ma.SolverOptions(**self.solver)

    def with_tolerance(self, tol: float) -> ScenarioConfig:
        return _replace(self, solver={**self.solver, "tol": float(tol)})

    def with_output(self, out) -> ScenarioConfig:
        return _replace(self, output=None if out is None else str(out))


def _replace(cfg: ScenarioConfig, **changes) -> ScenarioConfig:
    return ScenarioConfig(**{**cfg.to_dict(), **changes})


def _normalize_model(raw, n: int, ndim: int) -> dict:
    if isinstance(raw, str):
        raw = {"name": raw}
    if not isinstance(raw, dict) or "name" not in raw:
        raise ScenarioError(f"model must be a name or an object with 'name', got {raw!r}")
    name = raw["name"]
    if name not in MODELS:
        raise ScenarioError(f"unknown model {name!r}; expected one of {list(MODELS)}")
    if name == "flat_torus":
        _check_keys(raw, {"name", "background"}, "model")
        return {"name": name, "background": _normalize_matrix(raw.get("background"), n)}
    if name == "conformal_torus":
        if n != 1:
            raise ScenarioError("conformal_torus needs n = 1")
        _check_keys(raw, {"name", "f"}, "model")
        return {"name": name, "f": normalize_field_spec(raw.get("f"), ndim, "model.f")}
    if name == "product":
        if n != 2:
            raise ScenarioError("product needs n = 2")
        _check_keys(raw, {"name", "factors"}, "model")
        factors = raw.get("factors", ["flat_torus", "flat_torus"])
        if not isinstance(factors, list) or len(factors) != 2:
            raise ScenarioError("product needs exactly two factors")
        out = []
        for i, fac in enumerate(factors):
            fac = {"name": fac} if isinstance(fac, str) else fac
            _check_keys(fac, {"name", "f"}, f"model.factors[{i}]")
            if fac.get("name") not in FACTOR_MODELS:
                raise ScenarioError(f"model.factors[{i}]: unknown factor model {fac.get('name')!r}")
            f = normalize_field_spec(fac.get("f"), 2, f"model.factors[{i}].f")
            if fac["name"] == "flat_torus":
                f = {"constant": 0.0, "terms": []}
            out.append({"name": "conformal_torus", "f": f})
        return {"name": name, "factors": out}
    _check_keys(raw, {"name", "background", "phi"}, "model")
    return {
        "name": name,
        "background": _normalize_matrix(raw.get("background"), n),
        "phi": normalize_field_spec(raw.get("phi"), ndim, "model.phi"),
    }


def _normalize_matrix(raw, n: int) -> list:
    if raw is None:
        return [[1.0 if i == j else 0.0 for j in range(n)] for i in range(n)]
    if not isinstance(raw, list) or len(raw) != n or any(not isinstance(r, list) or len(r) != n for r in raw):
        raise ScenarioError(f"background must be a real {n}x{n} matrix")
    mat = [[_number(x, "background") for x in row] for row in raw]
    if any(mat[i][j] != mat[j][i] for i in range(n) for j in range(n)):
        raise ScenarioError("background must be symmetric")
    return mat


def _normalize_twist(raw, ndim: int) -> dict:
    if raw is None or raw == "geometric":
        return {"mode": "geometric"}
    if isinstance(raw, dict) and "synthetic" in raw:
        _check_keys(raw, {"synthetic"}, "twist")
        raw = {"mode": "synthetic", **raw["synthetic"]}
    if not isinstance(raw, dict):
        raise ScenarioError(f"unknown twist {raw!r}")
    mode = raw.get("mode")
    if mode == "geometric":
        _check_keys(raw, {"mode"}, "twist")
        return {"mode": "geometric"}
    if mode != "synthetic":
        raise ScenarioError(f"unknown twist mode {mode!r}")
    _check_keys(raw, {"mode", "lambda", "psi"}, "twist")
    return {
        "mode": "synthetic",
        "lambda": _number(raw.get("lambda", 0.0), "twist.lambda"),
        "psi": normalize_field_spec(raw.get("psi"), ndim, "twist.psi"),
    }


def _normalize_weight(raw, ndim: int) -> dict | None:
    if raw is None:
        return None
    if isinstance(raw, (int, float)) and not isinstance(raw, bool):
        raw = {"field": raw}
    _check_keys(raw, {"field", "x0"}, "synthetic_M")
    x0 = raw.get("x0")
    if x0 is not None and (not isinstance(x0, list) or len(x0) != ndim or any(not isinstance(i, int) for i in x0)):
        raise ScenarioError(f"synthetic_M.x0 must be a node index of {ndim} integers")
    return {"field": normalize_field_spec(raw.get("field"), ndim, "synthetic_M.field"), "x0": x0}


def _normalize_schedule(raw) -> list:
    if raw is None:
        raw = {}
    if isinstance(raw, dict):
        _check_keys(raw, {"count", "start", "ratio"}, "schedule")
        count = raw.get("count", 20)
        if isinstance(count, bool) or not isinstance(count, int) or count < 1:
            raise ScenarioError("schedule.count must be a positive integer")
        start = _number(raw.get("start", 1.0), "schedule.start")
        ratio = _number(raw.get("ratio", 0.5), "schedule.ratio")
        if not 0 < ratio < 1:
            raise ScenarioError("schedule.ratio must lie in (0, 1)")
        raw = ma.default_schedule(count, start, ratio)
    if not isinstance(raw, list):
        raise ScenarioError("schedule must be a list or {count, start, ratio}")
    try:
        return ma._validate_schedule([_number(e, "schedule") for e in raw])
    except ValueError as exc:
        raise ScenarioError(f"invalid schedule: {exc}") from exc


def _normalize_lattice(raw, n: int) -> dict:
    ndim = 2 * n
    raw = raw or {}
    _check_keys(raw, {"periods", "resolution"}, "lattice")
    periods = raw.get("periods", [1.0] * ndim)
    res = raw.get("resolution", [DEFAULT_RESOLUTION[n]] * ndim)
    if isinstance(res, int):
        res = [res] * ndim
    if not isinstance(periods, list) or len(periods) != ndim or not isinstance(res, list) or len(res) != ndim:
        raise ScenarioError(f"lattice needs {ndim} periods and resolutions")
    periods = [_number(p, "lattice.periods") for p in periods]
    try:
        grid.make_lattice(n, periods, res)
    except ValueError as exc:
        raise ScenarioError(f"invalid lattice: {exc}") from exc
    return {"periods": periods, "resolution": [int(r) for r in res]}


def _normalize_solver(raw) -> dict:
    defaults = ma.SolverOptions().__dict__
    raw = raw or {}
    _check_keys(raw, set(defaults), "solver")
    out = {}
    for key, default in defaults.items():
        value = raw.get(key, default)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ScenarioError(f"solver.{key} must be a boolean")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ScenarioError(f"solver.{key} must be a positive integer")
        else:
            value = _number(value, f"solver.{key}")
            if value <= 0:
                raise ScenarioError(f"solver.{key} must be positive")
        out[key] = value
    return out


def _normalize_classification(raw) -> dict | None:
    """``{"threshold": t}`` overriding the default ``1e-6 * Vol`` BigLimit threshold."""
    if raw is None:
        return None
    _check_keys(raw, {"threshold"}, "classification")
    t = _number(raw.get("threshold"), "classification.threshold")
    if t <= 0:
        raise ScenarioError("classification.threshold must be positive")
    return {"threshold": t}


def config_from_dict(raw: dict) -> ScenarioConfig:
    """Validate a raw config mapping and fill defaults."""
    _check_keys(raw, TOP_KEYS, "config")
    n = raw.get("n", 1)
    if n not in (1, 2) or isinstance(n, bool):
        raise ScenarioError(f"n must be 1 or 2, got {n!r}")
    ndim = 2 * n
    if "model" not in raw:
        raise ScenarioError("config needs a model")
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ScenarioError("seed must be a non-negative integer")
    output = raw.get("output")
    if output is not None and not isinstance(output, str):
        raise ScenarioError("output must be a path string")
    return ScenarioConfig(
        model=_normalize_model(raw["model"], n, ndim),
        n=n,
        twist=_normalize_twist(raw.get("twist"), ndim),
        synthetic_M=_normalize_weight(raw.get("synthetic_M"), ndim),
        lattice=_normalize_lattice(raw.get("lattice"), n),
        schedule=_normalize_schedule(raw.get("schedule")),
        solver=_normalize_solver(raw.get("solver")),
        classification=_normalize_classification(raw.get("classification")),
        output=output,
        seed=seed,
    )


def load_scenario(path) -> ScenarioConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(raw)


def loads_scenario(text: str) -> ScenarioConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"not valid JSON ({exc})") from exc
    return config_from_dict(raw)


# --- model construction -----------------------------------------------------------


@dataclass
class Model:
    config: ScenarioConfig
    lattice: Lattice
    metric: geo.MetricField
    twist: ma.TwistField
    synthetic_weight: np.ndarray | None
    factors: tuple = ()


def build_lattice(cfg: ScenarioConfig) -> Lattice:
    return grid.make_lattice(cfg.n, cfg.lattice["periods"], cfg.lattice["resolution"])


def build_model(cfg: ScenarioConfig) -> Model:
    """Metric, twist and synthetic weight of a scenario."""
    lat = build_lattice(cfg)
    spec = cfg.model
    factors = ()
    try:
        if spec["name"] == "flat_torus":
            metric = geo.flat_metric(lat, np.array(spec["background"]))
        elif spec["name"] == "conformal_torus":
            metric = geo.conformal_metric(lat, evaluate_field(lat, spec["f"]))
        elif spec["name"] == "product":
            lats = [grid.make_lattice(1, cfg.lattice["periods"][2 * a:2 * a + 2], cfg.lattice["resolution"][2 * a:2 * a + 2])
                    for a in range(2)]
            factors = tuple(geo.conformal_metric(la, evaluate_field(la, fac["f"])) for la, fac in zip(lats, spec["factors"]))
            metric = geo.product_metric(*factors)
        else:
            metric = geo.metric_from_potential(lat, np.array(spec["background"]), evaluate_field(lat, spec["phi"]))
    except geo.PositivityError as exc:
        raise ScenarioError(f"model metric is not positive: {exc}") from exc
    if cfg.twist["mode"] == "geometric":
        twist = ma.geometric_twist(metric)
    else:
        twist = ma.synthetic_twist(metric, cfg.twist["lambda"], evaluate_field(lat, cfg.twist["psi"]))
    weight = None if cfg.synthetic_M is None else evaluate_field(lat, cfg.synthetic_M["field"])
    return Model(cfg, lat, metric, twist, weight, factors)


def curvature_weight(model: Model, report: geo.CurvatureReport) -> tuple[np.ndarray, str]:
    """The weight ``M`` used by the sweep and the machinery, with its origin."""
    cfg = model.config
    if model.synthetic_weight is None:
        return report.M, "geometric"
    M = model.synthetic_weight
    if cfg.synthetic_M["x0"] is not None:
        try:
            return geo.smooth_minorant(model.lattice, M, cfg.synthetic_M["x0"]), "synthetic_minorant"
        except ValueError as exc:
            raise ScenarioError(f"synthetic_M: {exc}") from exc
    return M, "synthetic"


# --- run -------------------------------------------------------------------------------


def versions() -> dict:
    return {
        "kahlerlab": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n")


def _finite(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    path.write_text(buf.getvalue())


def sweep_rows(record: ma.SweepRecord) -> list[list]:
    rows = []
    for e in record.entries:
        s = e.solution
        rows.append([
            float(e.epsilon), float(s.sup_u), float(s.inf_u), float(s.residual_sup), int(s.newton_iterations),
            float(e.mass), float(e.cohomological_mass), float(e.min_trace_margin),
            float(e.lambda_min_global), float(e.mbar_eps),
        ])
    return rows


def _entry_name(kind: str, k: int) -> str:
    return f"fields/{kind}_{k:02d}"


def output_dir(cfg: ScenarioConfig, out=None) -> Path:
    if out is not None:
        return Path(out)
    if cfg.output is not None:
        return Path(cfg.output)
    return Path(f"run-{cfg.config_hash[:12]}")


def run(cfg: ScenarioConfig, out=None) -> Path:
    """Run the full pipeline and write its artifacts into ``out``.

    Files: ``config.json``, ``sweep.csv``, ``classification.json``,
    ``curvature.json``, ``kw_report.json``, ``fields/*`` dumps and a
    ``manifest.json`` listing the config hash, library versions and a
    checksum of every other file.
    """
    out = output_dir(cfg, out)
    # artifacts of an earlier run in the same directory would otherwise leak into the manifest
    if (out / "fields").is_dir():
        shutil.rmtree(out / "fields")
    for name in (*DERIVED_FILES, "kw_report.json"):
        (out / name).unlink(missing_ok=True)
    (out / "fields").mkdir(parents=True, exist_ok=True)
    model = build_model(cfg)
    lat, metric, twist = model.lattice, model.metric, model.twist
    curv = geo.chern_curvature(metric)
    report = geo.kappa_field(curv, metric)
    M, weight_kind = curvature_weight(model, report)
    try:
        record = ma.epsilon_sweep(metric, twist, cfg.schedule, cfg.solver_options(), M=M)
    except ma.SolverError as exc:
        raise ma.SolverError(f"scenario {cfg.model['name']}: {exc}", epsilon=exc.epsilon) from exc
    if cfg.classification is not None and len(record.entries) >= 4:
        ma.classify_sweep(record, cfg.classification["threshold"])
    kwr = kw.kw_report(record, metric, twist, M, report.M) if len(record.entries) >= 4 else None

    (out / "config.json").write_text(cfg.serialize())
    _write_csv(out / "sweep.csv", SWEEP_COLUMNS, sweep_rows(record))
    _write_json(out / "classification.json", {k: _finite(v) if isinstance(v, float) else v
                                              for k, v in record.classification_json().items()})
    _write_json(out / "curvature.json", {
        **{k: float(v) if isinstance(v, float) else v for k, v in report.summary().items()},
        "hermitian_defect": curv.hermitian_defect(),
        "kahler_defect": curv.kahler_defect(),
        "weight": weight_kind,
    })
    grid.dump_field(out / "fields/kappa", lat, report.kappa, "kappa")
    grid.dump_field(out / "fields/M", lat, M, "M")
    for k, e in enumerate(record.entries):
        s = e.solution
        _, T, _ = ma.trace_diagnostics(s, metric)
        grid.dump_field(out / _entry_name("u", k), lat, s.u, f"u[{k}]")
        grid.dump_field(out / _entry_name("potential", k), lat, s.potential, f"potential[{k}]")
        grid.dump_field(out / _entry_name("T", k), lat, T, f"T[{k}]")
    dumps = {}
    if kwr is not None:
        grid.dump_field(out / "fields/f", lat, kwr.f, "f")
        grid.dump_field(out / "fields/poisson_weight", lat, kwr.weight, "poisson_weight")
        dumps["f"] = "fields/f.f64"
        dumps["poisson_weight"] = "fields/poisson_weight.f64"
        if kwr.phi_plus is not None:
            grid.dump_field(out / "fields/phi_plus", lat, kwr.phi_plus, "phi_plus")
            dumps["phi_plus"] = "fields/phi_plus.f64"
        _write_json(out / "kw_report.json", _clean(kwr.to_json(dumps)))
    files = sorted(p for p in out.rglob("*")
                   if p.is_file() and p.relative_to(out).as_posix() not in ("manifest.json", *DERIVED_FILES))
    _write_json(out / "manifest.json", {
        "config_hash": cfg.config_hash,
        "versions": versions(),
        "entries": len(record.entries),
        "files": {p.relative_to(out).as_posix(): _sha256(p) for p in files},
    })
    return out


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return _finite(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def solve_single(cfg: ScenarioConfig, eps: float | None = None, out=None) -> Path:
    """One solve at ``eps`` (default: the first schedule entry), written to ``out``."""
    out = output_dir(cfg, out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg)
    eps = cfg.schedule[0] if eps is None else float(eps)
    if not (math.isfinite(eps) and eps > 0):
        raise ScenarioError(f"epsilon must be a positive finite number, got {eps!r}")
    sol = ma.solve_ma(model.metric, model.twist, eps, cfg.solver_options())
    _, T, lam = ma.trace_diagnostics(sol, model.metric)
    grid.dump_field(out / "u", model.lattice, sol.u, "u")
    grid.dump_field(out / "potential", model.lattice, sol.potential, "potential")
    _write_json(out / "solution.json", _clean({
        "epsilon": eps,
        "residual_sup": sol.residual_sup,
        "newton_iterations": sol.newton_iterations,
        "sup_u": sol.sup_u,
        "inf_u": sol.inf_u,
        "sup_bound": sol.sup_bound,
        "mass": ma.mass(sol, model.metric),
        "min_trace_margin": float(np.min(T + sol.u / model.metric.n)),
        "lambda_min_global": float(np.min(lam)),
    }))
    return out


def curvature_only(cfg: ScenarioConfig, out=None) -> Path:
    out = output_dir(cfg, out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg)
    curv = geo.chern_curvature(model.metric)
    report = geo.kappa_field(curv, model.metric)
    grid.dump_field(out / "kappa", model.lattice, report.kappa, "kappa")
    grid.dump_field(out / "M", model.lattice, report.M, "M")
    _write_json(out / "curvature.json", _clean({
        **report.summary(),
        "hermitian_defect": curv.hermitian_defect(),
        "kahler_defect": curv.kahler_defect(),
    }))
    return out


# --- loading a run back ---------------------------------------------------------------


@dataclass
class RunData:
    directory: Path
    config: ScenarioConfig
    manifest: dict
    model: Model
    rows: list[dict]
    u: list[np.ndarray]
    potential: list[np.ndarray]
    T: list[np.ndarray]
    kappa: np.ndarray
    M: np.ndarray
    kw: dict | None
    f: np.ndarray | None
    phi_plus: np.ndarray | None
    poisson_weight: np.ndarray | None = None
    classification: dict = field(default_factory=dict)

    def omega_eps(self, k: int) -> np.ndarray:
        cfg, tw, g = self.config, self.model.twist, self.model.metric.g
        eps = self.rows[k]["epsilon"]
        return eps * g + tw.lam * tw.background + grid.complex_hessian(self.model.lattice, self.potential[k])

    def solution(self, k: int) -> ma.Solution:
        u = self.u[k]
        return ma.Solution(
            epsilon=self.rows[k]["epsilon"], u=u, omega_eps=self.omega_eps(k),
            residual_sup=self.rows[k]["residual_sup"], newton_iterations=int(self.rows[k]["newton_iterations"]),
            sup_u=float(np.max(u)), inf_u=float(np.min(u)), sup_bound=None, potential=self.potential[k],
        )


def _load(path: Path) -> np.ndarray:
    return grid.load_field(path)[1]


def read_sweep_csv(path: Path) -> tuple[list[str], list[dict]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [{h: (int(v) if h == "newton_iterations" else float(v)) for h, v in zip(header, row)} for row in reader]
    return header, rows


def load_run(directory) -> RunData:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"{d}: no manifest.json; not a run directory")
    manifest = json.loads(mpath.read_text())
    cfg = loads_scenario((d / "config.json").read_text())
    _, rows = read_sweep_csv(d / "sweep.csv")
    count = len(rows)
    kwj = json.loads((d / "kw_report.json").read_text()) if (d / "kw_report.json").exists() else None
    return RunData(
        directory=d,
        config=cfg,
        manifest=manifest,
        model=build_model(cfg),
        rows=rows,
        u=[_load(d / (_entry_name("u", k) + ".f64")) for k in range(count)],
        potential=[_load(d / (_entry_name("potential", k) + ".f64")) for k in range(count)],
        T=[_load(d / (_entry_name("T", k) + ".f64")) for k in range(count)],
        kappa=_load(d / "fields/kappa.f64"),
        M=_load(d / "fields/M.f64"),
        kw=kwj,
        f=_load(d / "fields/f.f64") if (d / "fields/f.f64").exists() else None,
        phi_plus=_load(d / "fields/phi_plus.f64") if (d / "fields/phi_plus.f64").exists() else None,
        poisson_weight=_load(d / "fields/poisson_weight.f64") if (d / "fields/poisson_weight.f64").exists() else None,
        classification=json.loads((d / "classification.json").read_text()),
    )


# --- verification -------------------------------------------------------------------


INVARIANTS = (
    "grid.constant_derivative",
    "grid.mixed_derivatives_commute",
    "grid.divergence_theorem",
    "grid.poisson_roundtrip",
    "geometry.curvature_symmetry",
    "geometry.metric_scaling",
    "geometry.kappa_dominates_samples",
    "geometry.ricci_independent",
    "geometry.product_hsc",
    "continuity.residual",
    "continuity.positivity",
    "continuity.sup_bound",
    "continuity.eps_monotonicity",
    "continuity.trace_lemma",
    "continuity.mass_identity",
    "continuity.sweep_record",
    "kw.inf_normalization",
    "kw.mbar_invariance",
    "kw.comparison_soundness",
    "kw.c_eps_bound",
    "kw.supersolution_constants",
    "kw.diff_inequality",
    "kw.guenancia",
    "scenarios.determinism",
    "scenarios.completeness",
    "scenarios.csv_schema",
    "scenarios.dump_integrity",
)

PASS, FAIL, SKIPPED = "pass", "fail", "skipped"


@dataclass
class VerifyEntry:
    name: str
    status: str
    measured: float | None = None
    tolerance: float | None = None
    detail: str = ""

    def to_dict(self) -> dict:
        return _clean(dict(self.__dict__))


@dataclass
class VerifyReport:
    entries: list[VerifyEntry] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(e.status != FAIL for e in self.entries)

    @property
    def exit_status(self) -> int:
        return 0 if self.ok else 1

    def by_name(self) -> dict[str, VerifyEntry]:
        return {e.name: e for e in self.entries}

    def to_json(self) -> dict:
        return {"ok": self.ok, "entries": [e.to_dict() for e in self.entries]}


def _check(name, measured, tol, ok, detail="") -> VerifyEntry:
    return VerifyEntry(name, PASS if ok else FAIL, _finite(measured), tol, detail)


def _skip(name, reason) -> VerifyEntry:
    return VerifyEntry(name, SKIPPED, None, None, reason)


def _random_trig(lattice: Lattice, rng, modes: int = 4, kmax: int = 2) -> np.ndarray:
    coords = lattice.coords()
    out = np.zeros(lattice.shape)
    for _ in range(modes):
        k = rng.integers(-kmax, kmax + 1, size=lattice.ndim)
        phase = sum(2 * np.pi * kk * x / L for kk, x, L in zip(k, coords, lattice.periods))
        out = out + rng.normal() * np.cos(phase + rng.uniform(0, 2 * np.pi))
    return out


def _grid_checks(lat: Lattice, rng, sample) -> list[VerifyEntry]:
    out = []
    const = np.full(lat.shape, 3.7)
    worst = max(grid.sup_norm(grid.wirtinger_derivative(lat, const, ax, conj))
                for ax in range(lat.dim_c) for conj in (False, True))
    out.append(_check("grid.constant_derivative", worst, 1e-12, worst <= 1e-12))
    h = _random_trig(lat, rng)
    err, ref = 0.0, 0.0
    for a in range(lat.dim_c):
        for b in range(lat.dim_c):
            one = grid.wirtinger_derivative(lat, grid.wirtinger_derivative(lat, h, b, True), a, False)
            two = grid.wirtinger_derivative(lat, grid.wirtinger_derivative(lat, h, a, False), b, True)
            err = max(err, grid.sup_norm(one - two))
            ref = max(ref, grid.sup_norm(one))
    rel = err / max(ref, 1e-300)
    out.append(_check("grid.mixed_derivatives_commute", rel, 1e-10, rel <= 1e-10))
    div = abs(grid.integrate(lat, grid.flat_laplacian(lat, sample))) / max(grid.sup_norm(sample), 1e-300)
    out.append(_check("grid.divergence_theorem", div, 1e-10, div <= 1e-10, "h = smallest-eps solution u"))
    h0 = h - np.mean(h)
    back = grid.solve_flat_poisson(lat, grid.flat_laplacian(lat, h0))
    rel = grid.sup_norm(back - h0) / grid.sup_norm(h0)
    out.append(_check("grid.poisson_roundtrip", rel, 1e-10, rel <= 1e-10))
    return out


def _geometry_checks(data: RunData, rng) -> list[VerifyEntry]:
    out = []
    model = data.model
    lat, metric = model.lattice, model.metric
    curv = geo.chern_curvature(metric)
    defect = max(curv.hermitian_defect(), curv.kahler_defect())
    out.append(_check("geometry.curvature_symmetry", defect, 1e-10, defect <= 1e-10))

    c = 2.5
    scaled = metric.scaled(c)
    curv_s = geo.chern_curvature(scaled)
    nodes = [tuple(int(rng.integers(0, r)) for r in lat.shape) for _ in range(8)]
    hsc_err = 0.0
    for node in nodes:
        v = rng.normal(size=lat.dim_c) + 1j * rng.normal(size=lat.dim_c)
        h1 = geo.hsc(curv, metric, node, v)
        h2 = geo.hsc(curv_s, scaled, node, v)
        hsc_err = max(hsc_err, abs(c * h2 - h1) / max(abs(h1), 1e-12))
    kap = data.kappa
    kap_s = geo.kappa_field(curv_s, scaled).kappa
    kap_err = grid.sup_norm(c * kap_s - kap) / max(grid.sup_norm(kap), 1e-12)
    worst = max(hsc_err, kap_err)
    out.append(_check("geometry.metric_scaling", worst, 1e-10, worst <= 1e-10))

    # every direction the extremizer sampled, at every node
    if lat.dim_c == 1:
        margin = 0.0
    else:
        Rf = geo.frame_curvature(curv, geo.orthonormal_frame(metric)).reshape((-1, 2, 2, 2, 2))
        pts = geo.fibonacci_sphere(geo.DEFAULT_SAMPLES)
        flat_kappa = kap.reshape(-1)
        margin = np.inf
        for lo in range(0, lat.size, 8192):
            cq, bq, Aq = geo.hsc_quadratic(Rf[lo:lo + 8192])
            vals = cq[:, None] + bq @ pts.T + np.einsum("pi,nij,pj->np", pts, Aq, pts)
            margin = min(margin, float(np.min(-flat_kappa[lo:lo + 8192, None] - vals)))
    out.append(_check("geometry.kappa_dominates_samples", margin, 0.0, margin >= 0.0))

    # determinant through eigenvalues, then derivatives one Wirtinger factor at a time
    logdet = np.sum(np.log(np.linalg.eigvalsh(metric.g)), axis=-1)
    ric = geo.ricci_form(metric)
    err = 0.0
    for a in range(lat.dim_c):
        for b in range(lat.dim_c):
            d = grid.wirtinger_derivative(lat, grid.wirtinger_derivative(lat, logdet, b, True), a, False)
            err = max(err, grid.sup_norm(ric[..., a, b] + d))
    out.append(_check("geometry.ricci_independent", err, 1e-10, err <= 1e-10))

    if model.config.model["name"] != "product":
        out.append(_skip("geometry.product_hsc", "model is not a product"))
    else:
        f1, f2 = model.factors
        c1, c2 = geo.chern_curvature(f1), geo.chern_curvature(f2)
        err = 0.0
        for node in nodes:
            v = rng.normal(size=2) + 1j * rng.normal(size=2)
            g1 = f1.g[node[0], node[1], 0, 0].real
            g2 = f2.g[node[2], node[3], 0, 0].real
            h1 = geo.hsc(c1, f1, node[:2], v[:1])
            h2 = geo.hsc(c2, f2, node[2:], v[1:])
            n1, n2 = g1 * abs(v[0]) ** 2, g2 * abs(v[1]) ** 2
            expect = (h1 * n1**2 + h2 * n2**2) / (n1 + n2) ** 2
            err = max(err, abs(geo.hsc(curv, metric, node, v) - expect))
        out.append(_check("geometry.product_hsc", err, 1e-8, err <= 1e-8))
    return out


def _hypothesis_reason(data: RunData) -> str:
    """Why the trace inequality is not guaranteed for this run."""
    model = data.model
    kap = data.kappa
    if model.metric.is_flat():
        return "hypotheses: twist form not semi-positive"
    if np.min(kap) < 0 < np.max(kap):
        return "hypotheses: kappa sign-changing"
    return "hypotheses: non-flat background without a curvature sign guarantee"


def _n1_strict_reason() -> str:
    return "hypotheses: strict inequality needs n >= 2 (for n = 1, T + u = 0 up to the equation residual)"


def _continuity_checks(data: RunData) -> list[VerifyEntry]:
    out = []
    cfg, model = data.config, data.model
    metric, twist = model.metric, model.twist
    n = metric.n
    tol = cfg.solver["tol"]
    count = len(data.rows)
    res = [grid.sup_norm(ma.residual(metric, twist, r["epsilon"], data.u[k], data.potential[k]))
           for k, r in enumerate(data.rows)]
    worst = max(res)
    out.append(_check("continuity.residual", worst, tol, worst <= tol, f"worst entry {int(np.argmax(res))}"))

    lam_min, margins, sup_gap, mass_err = [], [], [], []
    for k, r in enumerate(data.rows):
        sol = data.solution(k)
        lam = ma.generalized_eigenvalues(sol.omega_eps, metric.g)[..., 0]
        lam_min.append(float(np.min(lam)))
        if np.all(lam > 0):
            _, T, _ = ma.trace_diagnostics(sol, metric)
            margins.append(float(np.min(T + sol.u / n)))
        base = r["epsilon"] * metric.g + twist.rho
        if np.all(geo.min_eigenvalue(base) > 0):
            bound = float(np.max(geo.log_det(base) - geo.log_det(metric.g)))
            sup_gap.append(float(np.max(sol.u)) - bound)
        m = ma.mass(sol, metric)
        cm = ma.cohomological_mass(r["epsilon"], ma.intersection_numbers(metric, twist))
        mass_err.append(abs(m - cm) / abs(m))
    pos = min(lam_min)
    out.append(_check("continuity.positivity", pos, 0.0, pos > 0))
    if sup_gap:
        g = max(sup_gap)
        out.append(_check("continuity.sup_bound", g, 1e-8, g <= 1e-8, f"{len(sup_gap)} of {count} entries bounded"))
    else:
        out.append(_skip("continuity.sup_bound", "eps g + rho is not pointwise positive for any entry"))
    mono = max((float(np.max(data.u[k + 1] - data.u[k])) for k in range(count - 1)), default=-np.inf)
    out.append(_check("continuity.eps_monotonicity", mono, 1e-8, mono <= 1e-8))
    tm = min(margins) if len(margins) == count else -np.inf
    if n == 1:
        e = _skip("continuity.trace_lemma", _n1_strict_reason())
        e.measured = _finite(tm)
        out.append(e)
    else:
        out.append(_check("continuity.trace_lemma", tm, 0.0, tm > 0))
    me = max(mass_err)
    out.append(_check("continuity.mass_identity", me, 1e-6, me <= 1e-6))
    eps = [r["epsilon"] for r in data.rows]
    masses = [ma.mass(data.solution(k), metric) for k in range(count)]
    ok = all(b < a for a, b in zip(eps, eps[1:])) and all(m > 0 for m in masses)
    out.append(_check("continuity.sweep_record", min(masses), 0.0, ok, "eps strictly decreasing, mass > 0"))
    return out


def _kw_checks(data: RunData, rng) -> list[VerifyEntry]:
    out = []
    model = data.model
    lat, metric, twist = model.lattice, model.metric, model.twist
    n = metric.n
    last = len(data.rows) - 1
    sol = data.solution(last)
    M = data.M
    if data.f is None:
        out.append(_skip("kw.inf_normalization", "no weighted Poisson solve (fewer than 4 entries)"))
    else:
        W = data.poisson_weight
        mb = kw.mbar(sol, W, metric)
        r = grid.sup_norm(kw.weighted_laplacian(lat, sol.omega_eps, data.f) - (W - mb))
        ok = float(np.min(data.f)) == 0.0 and r <= kw.POISSON_TOL * max(1.0, grid.sup_norm(W - mb))
        out.append(_check("kw.inf_normalization", r, kw.POISSON_TOL, ok, f"min f = {float(np.min(data.f))!r}"))
    inv = max(abs(kw.mbar(data.solution(k), M, metric)
                  - ma.weighted_average(lat, kw.normalize_sup(data.u[k]), M, metric.det()))
              for k in range(len(data.rows)))
    out.append(_check("kw.mbar_invariance", inv, 1e-12, inv <= 1e-12))

    worst, used = np.inf, 0
    for lat_k, omega in ((lat, sol.omega_eps),):
        for _ in range(20):
            pm, pp, Mw = kw.manufactured_pair(lat_k, omega, rng)
            rep = kw.check_comparison(lat_k, pm, pp, Mw, omega)
            if rep.checked:
                used += 1
                worst = min(worst, rep.ordering_margin)
    if used == 0:
        out.append(_skip("kw.comparison_soundness", "no manufactured pair had verified residual signs"))
    else:
        out.append(_check("kw.comparison_soundness", worst, -1e-8, worst >= -1e-8, f"{used} verified pairs"))

    excess = min(float(np.min(data.T[k] + np.max(data.u[k]) / n)) for k in range(len(data.rows)))
    if n == 1:
        e = _skip("kw.c_eps_bound", _n1_strict_reason())
        e.measured = _finite(excess)
        out.append(e)
    else:
        out.append(_check("kw.c_eps_bound", excess, 0.0, excess > 0, "min over nodes of T + sup u / n"))

    kwj = data.kw or {}
    mbar0 = kwj.get("mbar0")
    if mbar0 is None:
        out.append(_skip("kw.supersolution_constants", f"hypotheses: limit weight unavailable ({kwj.get('mbar0_status', 'no report')})"))
    else:
        A, B = kwj["A"], kwj["B"]
        W = data.poisson_weight
        tail = [kw.mbar(data.solution(k), W, metric) for k in (len(data.rows) - 2, len(data.rows) - 1)]
        worst_tail = max(1 - A * m for m in tail)
        pos = W >= 0
        prod = float(np.min(W[pos] * (math.exp(B) - A))) if np.any(pos) else 0.0
        ok = worst_tail < 0 and prod >= 0 and A > 1 / mbar0 and B > math.log(A)
        out.append(_check("kw.supersolution_constants", worst_tail, 0.0, ok, f"min M(e^B - A) on M >= 0: {prod!r}"))

    # the trace inequalities concern the curvature weight, not a synthetic stand-in
    Mc = (n + 1) / (2 * n) * data.kappa
    applicable = kw.theory_applicable(metric, twist, Mc)
    rep = kw.check_diff_inequality(sol, Mc, metric, twist)
    if applicable:
        out.append(_check("kw.diff_inequality", rep.min_residual, -1e-6, bool(rep.holds)))
    else:
        e = _skip("kw.diff_inequality", _hypothesis_reason(data))
        e.measured = _finite(rep.min_residual)
        out.append(e)
    gr = kw.guenancia_check(sol, Mc, metric, twist)
    if gr.applicable:
        out.append(_check("kw.guenancia", gr.lhs - gr.rhs, 0.0, gr.holds, f"C_eps = {gr.C_eps!r}"))
    else:
        e = _skip("kw.guenancia", _hypothesis_reason(data) if not applicable else "hypotheses: M negative somewhere")
        e.measured = _finite(gr.lhs - gr.rhs)
        out.append(e)
    return out


def _scenario_checks(data: RunData, rerun: bool) -> list[VerifyEntry]:
    out = []
    d = data.directory
    if rerun:
        with tempfile.TemporaryDirectory() as tmp:
            again = run(data.config, Path(tmp) / "again")
            names = sorted(nm for nm in [*data.manifest.get("files", {}), "manifest.json"]
                           if "/" not in nm and nm.endswith((".csv", ".json")) and nm not in DERIVED_FILES)
            diff = [nm for nm in names if (d / nm).read_bytes() != (again / nm).read_bytes()]
        out.append(_check("scenarios.determinism", float(len(diff)), 0.0, not diff,
                          "differing: " + ", ".join(diff) if diff else f"{len(names)} files identical"))
    else:
        out.append(_skip("scenarios.determinism", "re-run disabled"))
    out.append(VerifyEntry("scenarios.completeness", PASS))  # filled in by verify_run
    header, _ = read_sweep_csv(d / "sweep.csv")
    out.append(_check("scenarios.csv_schema", None, None, tuple(header) == SWEEP_COLUMNS, ",".join(header)))
    bad = [name for name, digest in data.manifest.get("files", {}).items()
           if not (d / name).exists() or _sha256(d / name) != digest]
    out.append(_check("scenarios.dump_integrity", float(len(bad)), 0.0, not bad,
                      "mismatched: " + ", ".join(bad) if bad else "all checksums match"))
    return out


def verify_run(directory, rerun: bool = True) -> VerifyReport:
    """Recompute every invariant from the artifacts of a run directory."""
    data = load_run(directory)
    rng = np.random.default_rng(data.config.seed)
    entries = []
    entries += _grid_checks(data.model.lattice, rng, data.u[-1])
    entries += _geometry_checks(data, rng)
    entries += _continuity_checks(data)
    entries += _kw_checks(data, rng)
    entries += _scenario_checks(data, rerun)
    names = [e.name for e in entries]
    complete = sorted(names) == sorted(INVARIANTS) and len(set(names)) == len(names)
    for e in entries:
        if e.name == "scenarios.completeness":
            e.status = PASS if complete else FAIL
            e.measured = float(len(names))
            e.detail = f"{len(set(names))} of {len(INVARIANTS)} invariants reported"
    report = VerifyReport(entries)
    _write_json(Path(directory) / "verify.json", report.to_json())
    return report


def verify(cfg: ScenarioConfig, out=None, rerun: bool = True) -> VerifyReport:
    """Verify the run of ``cfg``, running it first if its directory is not a run of this config."""
    d = output_dir(cfg, out)
    mpath = d / "manifest.json"
    if not mpath.exists() or json.loads(mpath.read_text()).get("config_hash") != cfg.config_hash:
        run(cfg, d)
    return verify_run(d, rerun=rerun)


# --- report --------------------------------------------------------------------------


def report(directory) -> dict:
    """Aggregate a run into ``summary.json`` and the plot-ready ``plot.csv``.

    Per-entry masses, ``sup u`` and ``inf T`` are recomputed from the dumps.
    """
    data = load_run(directory)
    d = data.directory
    metric = data.model.metric
    numbers = ma.intersection_numbers(metric, data.model.twist)
    table = []
    for k, r in enumerate(data.rows):
        sol = data.solution(k)
        table.append({
            "epsilon": r["epsilon"],
            "mass": ma.mass(sol, metric),
            "cohomological_mass": ma.cohomological_mass(r["epsilon"], numbers),
            "sup_u": float(np.max(data.u[k])),
            "inf_T": float(np.min(data.T[k])),
        })
    eps = np.array([t["epsilon"] for t in table])
    masses = np.array([t["mass"] for t in table])
    coef = np.polyfit(eps, masses, metric.n) if len(table) > metric.n else np.array([])
    margins = [float(np.min(data.T[k] + data.u[k] / metric.n)) for k in range(len(table))]
    kwj = data.kw or {}
    summary = _clean({
        "classification": data.classification.get("classification"),
        "extrapolated_mass0": float(coef[-1]) if coef.size else None,
        "fit_coefficients": [float(c) for c in coef],
        "threshold": data.classification.get("threshold"),
        "min_trace_margin": min(margins),
        "volume": metric.volume(),
        "kw": {k: kwj.get(k) for k in ("mbar_eps", "mbar0", "mbar0_status", "A", "B", "comparison_margin",
                                       "diff_ineq_min_residual", "guenancia")},
        "table": table,
    })
    _write_json(d / "summary.json", summary)
    _write_csv(d / "plot.csv", PLOT_COLUMNS, [[t[c] for c in PLOT_COLUMNS] for t in table])
    return summary
