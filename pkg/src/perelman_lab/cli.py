"""Configuration-driven experiment runner.

``perelman-lab run <config-file> [--out DIR] [--seed N] [--resolution N] [--list-experiments]``

A config file is flat ``key = value`` text; keys may carry dotted sections
(``metric.coeffs = 0.1, 0.05``) and ``[section]`` lines prefix the keys that
follow. Every run writes into the output directory:

* ``report.json``: config text, manifest and all checks;
* ``checks.csv``: one row per check;
* ``tables/<name>.csv`` and ``tables/<name>_<column>.dat`` (two-column
  gnuplot data) plus a ``plot.gp`` stub;
* ``timing.json``: wall times, kept apart so the other files are
  byte-identical for a fixed config and seed.

Reals are printed with 17 significant digits. The exit code is 0 iff every
check passed.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import csv
import math
import os
import platform
import sys
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import flow
from . import functionals as fn
from . import geometry as geo
from . import lgeo
from . import variants as var
from .geometry import ConformalTorus, Euclidean, RoundSphere

__all__ = [
    "ConfigError",
    "EXPERIMENTS",
    "ExperimentConfig",
    "RunReport",
    "dumps_json",
    "emit_report",
    "main",
    "parse_config",
    "run_experiment",
]


# --------------------------------------------------------------------------
# Config
# --------------------------------------------------------------------------


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def _parse_scalar(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for conv in (int, float):
        try:
            return conv(t)
        except ValueError:
            pass
    if len(t) >= 2 and t[0] == t[-1] and t[0] in "\"'":
        return t[1:-1]
    return t


def parse_config(text: str) -> dict:
    """Parse flat ``key = value`` text into a dict (values stay raw strings)."""
    out = {}
    errors = []
    section = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value'")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            errors.append(f"line {lineno}: empty key")
            continue
        key = f"{section}.{key}" if section else key
        if key in out:
            errors.append(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    if errors:
        raise ConfigError(errors)
    return out


def _coerce(kind, raw, key, errors):
    def bad():
        errors.append(f"{key}: cannot read {raw!r} as {kind}")

    if kind in ("floats", "ints", "strs"):
        parts = [p.strip() for p in str(raw).split(",") if p.strip()]
        base = {"floats": float, "ints": int, "strs": str}[kind]
        try:
            return [base(p) for p in parts]
        except ValueError:
            bad()
            return None
    if kind == "bool":
        v = _parse_scalar(str(raw))
        if isinstance(v, bool):
            return v
        bad()
        return None
    if kind == "int":
        try:
            return int(str(raw))
        except ValueError:
            bad()
            return None
    if kind == "float":
        try:
            return float(str(raw))
        except ValueError:
            bad()
            return None
    v = _parse_scalar(str(raw))
    return str(v)


@dataclass
class ExperimentConfig:
    """A validated experiment configuration.

    ``text`` is the config verbatim (embedded in every report); ``values``
    holds the typed parameters with defaults filled in.
    """

    experiment: str
    seed: int
    values: dict
    text: str
    overrides: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def rng(self, stream: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed & (2**64 - 1), stream])

    @property
    def digest(self) -> str:
        h = hashlib.sha256(self.text.encode())
        for k in sorted(self.overrides):
            h.update(f"\n{k}={self.overrides[k]}".encode())
        return h.hexdigest()


COMMON = {
    "experiment": ("str", None),
    "seed": ("int", 0),
    "out": ("str", ""),
    "description": ("str", ""),
}


def load_config(text: str, overrides: dict | None = None) -> ExperimentConfig:
    """Validate config text against the experiment schema; all errors are reported together."""
    raw = parse_config(text)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    raw.update({k: str(v) for k, v in overrides.items()})
    errors = []
    name = raw.get("experiment")
    if name is None:
        raise ConfigError(["missing key 'experiment'"])
    if name not in EXPERIMENTS:
        raise ConfigError([f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}"])
    schema = dict(COMMON)
    schema.update(EXPERIMENTS[name].schema)
    if "resolution" in overrides and "resolution" not in schema:
        # composite experiments: the override reaches every part's main grid
        raw.pop("resolution")
        for k in schema:
            if k.count(".") == 1 and k.endswith(".resolution"):
                raw[k] = str(overrides["resolution"])
    values = {}
    for key, (kind, default) in schema.items():
        if key in raw:
            values[key] = _coerce(kind, raw[key], key, errors)
        else:
            values[key] = default
    for key in raw:
        if key not in schema:
            errors.append(f"unknown key {key!r} for experiment {name!r}")
    if values.get("seed") is not None and not 0 <= values["seed"] < 2**64:
        errors.append("seed must be a 64-bit unsigned integer")
    for k, v in values.items():
        if k.split(".")[-1] == "resolution" and v is not None and v < 8:
            errors.append(f"{k} must be at least 8")
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(name, values["seed"], values, text, overrides)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


RELATIONS = ("abs<=", "<=", ">=", "true")


def _plain(x):
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return [_plain(v) for v in x.tolist()]
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    return x


def fmt_real(x: float) -> str:
    """17 significant digits; keeps a decimal point so the value re-reads as a float."""
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    s = "%.17g" % x
    if not any(c in s for c in ".eEn"):
        s += ".0"
    return s


def dumps_json(obj, indent: int = 0) -> str:
    """Deterministic JSON with 17-digit reals (``NaN``/``Infinity`` as Python's json reads them)."""
    pad = "  " * indent
    inner = "  " * (indent + 1)
    obj = _plain(obj)
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return fmt_real(obj)
    if isinstance(obj, str):
        import json

        return json.dumps(obj)
    if isinstance(obj, list):
        if not obj:
            return "[]"
        if all(not isinstance(v, (list, dict)) for v in obj):
            return "[" + ", ".join(dumps_json(v) for v in obj) + "]"
        return "[\n" + ",\n".join(inner + dumps_json(v, indent + 1) for v in obj) + "\n" + pad + "]"
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [inner + dumps_json(str(k)) + ": " + dumps_json(v, indent + 1) for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _cell(v) -> str:
    v = _plain(v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "%.17g" % v
    if v is None:
        return ""
    return str(v)


class RunReport:
    """Append-only record of checks, tables and informational values."""

    def __init__(self, cfg: ExperimentConfig | None = None):
        self.cfg = cfg
        self.checks = []
        self.tables = {}
        self.info = {}
        self.timing = {}

    def check(self, name: str, value, tolerance=None, relation: str = "abs<=", **detail) -> bool:
        """Record a check; pass/fail follows from ``value``, ``tolerance`` and ``relation`` only."""
        if relation not in RELATIONS:
            raise ValueError(f"unknown relation {relation!r}")
        value = _plain(value)
        if relation == "true":
            passed = bool(value)
        else:
            v = float(value)
            if relation == "abs<=":
                passed = math.isfinite(v) and abs(v) <= tolerance
            elif relation == "<=":
                passed = math.isfinite(v) and v <= tolerance
            else:
                passed = math.isfinite(v) and v >= tolerance
        rec = {"name": name, "value": value, "tolerance": tolerance, "relation": relation, "passed": passed}
        if detail:
            rec["detail"] = _plain(detail)
        self.checks.append(rec)
        return passed

    def fail(self, name: str, message: str):
        self.checks.append({"name": name, "value": None, "tolerance": None, "relation": "true", "passed": False, "detail": {"error": message}})

    def table(self, name: str, columns, rows):
        if name in self.tables:
            raise ValueError(f"table {name!r} already recorded")
        self.tables[name] = (list(columns), [list(_plain(r)) for r in rows])

    def note(self, key: str, value):
        self.info[key] = _plain(value)

    @property
    def all_passed(self) -> bool:
        return all(c["passed"] for c in self.checks)

    def manifest(self) -> dict:
        cfg = self.cfg
        return {
            "config_sha256": cfg.digest if cfg else "",
            "seed": cfg.seed if cfg else 0,
            "overrides": {k: str(v) for k, v in sorted((cfg.overrides if cfg else {}).items())},
            "versions": {
                "perelman_lab": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
        }

    def to_dict(self) -> dict:
        return {
            "experiment": self.cfg.experiment if self.cfg else "",
            "config": self.cfg.text if self.cfg else "",
            "manifest": self.manifest(),
            "all_passed": self.all_passed,
            "checks": self.checks,
            "info": self.info,
            "tables": sorted(self.tables),
        }


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def emit_report(r: RunReport, out_dir, formats=("json", "csv", "gnuplot")) -> list:
    """Write the report files; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(path: Path, text: str):
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        written.append(path)

    if "json" in formats:
        put(out / "report.json", dumps_json(r.to_dict()) + "\n")
    if "csv" in formats:
        rows = [[c["name"], c["value"] if not isinstance(c["value"], list) else None, c["tolerance"], c["relation"], c["passed"]] for c in r.checks]
        put(out / "checks.csv", _csv_text(["name", "value", "tolerance", "relation", "passed"], rows))
        for name, (cols, rows) in sorted(r.tables.items()):
            put(out / "tables" / f"{name}.csv", _csv_text(cols, rows))
    if "gnuplot" in formats:
        plot = ["# gnuplot stub: one panel per data file", "set terminal pngcairo size 800,600", ""]
        for name, (cols, rows) in sorted(r.tables.items()):
            for j in range(1, len(cols)):
                lines = [f"# {cols[0]} {cols[j]}"]
                for row in rows:
                    x, y = row[0], row[j]
                    if isinstance(x, (int, float)) and isinstance(y, (int, float)) and not isinstance(y, bool):
                        lines.append(f"{_cell(float(x))} {_cell(float(y))}")
                fname = f"{name}_{cols[j]}.dat"
                put(out / "tables" / fname, "\n".join(lines) + "\n")
                plot += [f"set output '{name}_{cols[j]}.png'", f"set xlabel '{cols[0]}'", f"set ylabel '{cols[j]}'",
                         f"plot 'tables/{fname}' using 1:2 with linespoints title '{cols[j]}'", ""]
        put(out / "plot.gp", "\n".join(plot))
    return written


def _write_timing(r: RunReport, out_dir):
    path = Path(out_dir) / "timing.json"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_json({"sections": r.timing, "total": float(sum(r.timing.values()))}) + "\n")
    return path


# --------------------------------------------------------------------------
# Shared helpers
# --------------------------------------------------------------------------


TORUS_BASIS = (
    lambda x, y: np.sin(x),
    lambda x, y: np.cos(y),
    lambda x, y: np.cos(2.0 * y),
    lambda x, y: np.sin(x + y),
)


def _torus(cfg: ExperimentConfig, N: int | None = None, key: str = "metric.coeffs") -> ConformalTorus:
    coeffs = list(cfg[key])
    if len(coeffs) > len(TORUS_BASIS):
        raise ValueError(f"{key} takes at most {len(TORUS_BASIS)} coefficients")

    def u0(x, y):
        return sum(c * b(x, y) for c, b in zip(coeffs, TORUS_BASIS)) + 0.0 * x

    return ConformalTorus.from_function(u0, N or cfg["resolution"])


def _rel(a, b) -> float:
    return abs(a - b) / max(abs(b), 1e-300)


def _section(report: RunReport, name: str, body):
    """Run one independent part; numerical aborts become failed checks."""
    t0 = time.perf_counter()
    try:
        body()
    except Exception as exc:  # recorded, run continues
        report.fail(f"{name}/aborted", f"{type(exc).__name__}: {exc}")
        frames = traceback.extract_tb(exc.__traceback__)[-3:]
        report.note(f"{name}/traceback", [f"{os.path.basename(f.filename)}:{f.lineno} in {f.name}" for f in frames])
    report.timing[name] = time.perf_counter() - t0


def _wants(cfg, name) -> bool:
    sel = cfg.values.get("checks") or []
    return not sel or name in sel


# --------------------------------------------------------------------------
# flow_monotonicity
# --------------------------------------------------------------------------


def _final_potential(m, coeffs):
    X = geo.coordinates(m)
    x, y = X[..., 0], X[..., 1]
    basis = (np.cos(x), np.sin(y), np.sin(y - x))
    if len(coeffs) > len(basis):
        raise ValueError(f"potential.coeffs takes at most {len(basis)} coefficients")
    f = sum(c * b for c, b in zip(coeffs, basis)) + 0.0 * x
    return f + math.log(geo.integrate(m, np.exp(-f)))


def exp_flow_monotonicity(cfg: ExperimentConfig, rep: RunReport):
    if cfg["backend"] == "euclidean":

        def law():
            rows = []
            worst = 0.0
            t0 = cfg["euclidean.t0"]
            for n in cfg["euclidean.dims"]:
                t_end = max(cfg["euclidean.times"])
                h = flow.run_history(Euclidean(n), t_end, flow.FlowConfig(dt=t_end / 8.0)) if t_end > 0 else None
                fT = geo.gaussian_potential(n, t0 - t_end)
                traj = flow.evolve_potential(h, fT) if h is not None else None
                for t in cfg["euclidean.times"]:
                    tau = t0 - t
                    k = int(np.argmin(np.abs(traj.times - t))) if traj is not None else 0
                    f = traj.values[k] if traj is not None else geo.gaussian_potential(n, tau)
                    m = Euclidean.for_scale(n, tau, resolution=97 if n < 3 else 65)
                    F = fn.eval_F(m, f)
                    exact = n / (2.0 * tau)
                    worst = max(worst, abs(F - exact))
                    rows.append([float(t), n, F, exact, F - exact])
            rep.table("euclidean_F", ["t", "n", "F", "exact", "error"], rows)
            rep.check("euclidean_F_law/max_abs_error", worst, cfg["tol.law"])

        _section(rep, "euclidean_F_law", law)
        return

    T = cfg["flow.T"]

    def measure():
        errs = []
        for N in cfg["measure.resolutions"]:
            m = _torus(cfg, N)
            h = flow.run_history(m, T)
            mT = h.snapshot(len(h) - 1)
            traj = flow.evolve_potential(h, _final_potential(mT, cfg["potential.coeffs"]))
            drift = max(abs(geo.integrate(h.snapshot(k), np.exp(-traj.values[k])) - 1.0) for k in range(len(h)))
            errs.append(drift)
        rep.table("measure", ["resolution", "max_drift"], [[N, e] for N, e in zip(cfg["measure.resolutions"], errs)])
        rep.check("measure/max_drift", max(errs), cfg["tol.measure"])
        for (n1, e1), (n2, e2) in zip(zip(cfg["measure.resolutions"], errs), zip(cfg["measure.resolutions"][1:], errs[1:])):
            order = math.log(e1 / e2) / math.log(n2 / n1)
            rep.check(f"measure/order_{n1}_{n2}", order, cfg["tol.order"], ">=")

    def monotone():
        m = _torus(cfg)
        h = flow.run_history(m, T)
        K = len(h)
        traj = flow.evolve_potential(h, _final_potential(h.snapshot(K - 1), cfg["potential.coeffs"]))
        Fs = np.array([fn.eval_F(h.snapshot(k), traj.values[k]) for k in range(K)])
        rep.check("monotone/F_min_step", float(np.min(np.diff(Fs))), -cfg["tol.slack"], ">=")
        idx = np.unique(np.linspace(1, K - 2, cfg["samples"]).round().astype(int))
        rows = []
        lam = {"lambda": [], "lambda_2": [], "lambda_half": []}
        worst = 0.0
        for k in idx:
            mk = h.snapshot(k)
            l1 = fn.lambda_k(mk, 1.0).eigenvalue
            l2 = fn.lambda_k(mk, 2.0).eigenvalue
            lh = fn.shifted_laplacian_eigenvalue(mk).eigenvalue
            prod = fn.production_F(mk, traj.values[k])
            rate = (Fs[k + 1] - Fs[k - 1]) / (h.times[k + 1] - h.times[k - 1])
            worst = max(worst, _rel(rate, prod))
            lam["lambda"].append(l1)
            lam["lambda_2"].append(l2)
            lam["lambda_half"].append(lh)
            rows.append([float(h.times[k]), Fs[k], l1, l2, lh, prod, rate])
        rep.table("flow", ["t", "F", "lambda", "lambda_2", "lambda_half", "production_F", "dF_dt"], rows)
        for key, vals in lam.items():
            rep.check(f"monotone/{key}_min_step", float(np.min(np.diff(vals))), -cfg["tol.slack"], ">=")
        rep.check("monotone/production_rel_error", worst, cfg["tol.production"], "<=")

    if _wants(cfg, "measure"):
        _section(rep, "measure", measure)
    if _wants(cfg, "monotone"):
        _section(rep, "monotone", monotone)


# --------------------------------------------------------------------------
# entropy_w
# --------------------------------------------------------------------------


def exp_entropy_w(cfg: ExperimentConfig, rep: RunReport):
    def soliton():
        rows = []
        wmax = pmax = 0.0
        T = cfg["soliton.T"]
        for n in cfg["soliton.dims"]:
            for t in cfg["soliton.times"]:
                tau = T - t
                m = Euclidean.for_scale(n, tau, resolution=97 if n < 3 else 65)
                pc = fn.PotentialConfig(geo.quadratic_field(1.0 / (4.0 * tau)), tau, True)
                W = fn.eval_W(m, pc)
                P = fn.production_W(m, pc)
                wmax, pmax = max(wmax, abs(W)), max(pmax, abs(P))
                rows.append([float(t), n, W, P])
        rep.table("soliton", ["t", "n", "W", "production_W"], rows)
        rep.check("soliton/W_max_abs", wmax, cfg["tol.soliton_W"])
        rep.check("soliton/production_max_abs", pmax, cfg["tol.soliton_production"])

    def flat_nonneg():
        rng = cfg.rng(1)
        vals = []
        dims = cfg["flat.dims"]
        for i in range(cfg["flat.count"]):
            n = dims[i % len(dims)]
            tau = float(rng.uniform(0.5, 2.0))
            m = Euclidean.for_scale(n, tau, resolution=97 if n < 3 else 49, widths=16.0)
            f = fn.random_potential(m, rng)
            vals.append(fn.eval_W(m, fn.normalize_potential(m, f, tau)))
        rep.table("flat_W", ["index", "W"], [[i, v] for i, v in enumerate(vals)])
        rep.check("flat/W_min", min(vals), -cfg["tol.flat"], ">=")

    def scaling():
        rng = cfg.rng(2)
        m = _torus(cfg)
        worst_w = worst_l = 0.0
        for a in cfg["scaling.alphas"]:
            f = fn.random_potential(m, rng)
            tau = float(rng.uniform(0.2, 1.0))
            ma = geo.rescale(m, a)
            worst_w = max(worst_w, abs(fn.w_integral(ma, f, a * tau) - fn.w_integral(m, f, tau)))
            st = var.ListState(m, fn.random_potential(m, rng, amplitude=0.1))
            sa = var.ListState(ma, st.u)
            worst_l = max(worst_l, abs(var.w_list_integral(sa, f, a * tau) - var.w_list_integral(st, f, tau)))
        rep.check("scaling/W", worst_w, cfg["tol.scaling"])
        rep.check("scaling/W_list", worst_l, cfg["tol.scaling"])

    def mu_sweep():
        m = ConformalTorus.flat(cfg["mu.resolution"], lx=cfg["mu.period"])
        taus = cfg["mu.taus"]
        vals = []
        rows = []
        for tau in taus:
            r = fn.mu(m, tau)
            closed = math.log(geo.volume(m) / (4.0 * math.pi * tau)) - 2.0
            vals.append(r.value)
            rows.append([tau, r.value, closed, int(r.converged)])
            rep.check(f"mu/converged_tau_{tau:g}", r.converged, None, "true")
        rep.table("mu", ["tau", "mu", "constant_W", "converged"], rows)
        i_min = int(np.argmin(taus))
        rep.check("mu/negative_at_smallest_tau", vals[i_min], 0.0, "<=")
        order = np.argsort(taus)[::-1]
        steps = np.diff(np.asarray(vals)[order])
        rep.check("mu/increasing_as_tau_decreases", float(np.min(steps)), 0.0, ">=")

    for name, body in (("soliton", soliton), ("flat", flat_nonneg), ("scaling", scaling), ("mu", mu_sweep)):
        if _wants(cfg, name):
            _section(rep, name, body)


# --------------------------------------------------------------------------
# spectral_sweep
# --------------------------------------------------------------------------


def exp_spectral_sweep(cfg: ExperimentConfig, rep: RunReport):
    def lam():
        m = _torus(cfg)
        rows = []
        for k in cfg["spectral.ks"]:
            r = fn.lambda_k(m, k)
            gap = _rel(fn.eval_F(m, r.f0, k), r.eigenvalue)
            rows.append([k, r.eigenvalue, r.residual, gap])
            rep.check(f"lambda_k/converged_k_{k:g}", r.converged, None, "true")
            rep.check(f"lambda_k/residual_k_{k:g}", r.residual, cfg["tol.residual"], "<=")
        # F_k at the ground state differs from lambda_k only by the O(h^2) log-gradient stencil gap
        rep.table("lambda_k", ["k", "lambda_k", "residual", "F_k_gap"], rows)
        mo = _torus(cfg, cfg["spectral.oracle_resolution"])
        for k in cfg["spectral.ks"]:
            a = fn.lambda_k(mo, k).eigenvalue
            b = fn.dense_lowest_eigenvalue(mo, 4.0, k * geo.scalar_curvature(mo))
            rep.check(f"lambda_k/dense_oracle_k_{k:g}", abs(a - b), cfg["tol.oracle"])

    def mu():
        m = _torus(cfg)
        rows = []
        for tau in cfg["spectral.taus"]:
            r = fn.mu(m, tau)
            rows.append([tau, r.value, int(r.converged)])
            rep.check(f"mu/converged_tau_{tau:g}", r.converged, None, "true")
            rep.check(f"mu/attained_tau_{tau:g}", abs(fn.eval_W(m, r.cfg) - r.value), cfg["tol.oracle"])
        rep.table("mu", ["tau", "mu", "converged"], rows)

    _section(rep, "lambda_k", lam)
    _section(rep, "mu", mu)


# --------------------------------------------------------------------------
# variation_oracle
# --------------------------------------------------------------------------


def exp_variation_oracle(cfg: ExperimentConfig, rep: RunReport):
    rng = cfg.rng(3)
    eps = cfg["eps"]
    tol = cfg["tol.relative"]
    m = _torus(cfg)
    rows = []
    worst = {"delta_F": 0.0, "delta_W": 0.0, "delta_F_rym": 0.0, "delta_W_rym": 0.0}
    for i in range(cfg["count"]):
        f = fn.random_potential(m, rng)
        psi = fn.random_potential(m, rng)
        h = fn.random_potential(m, rng)
        sigma = float(rng.normal())
        tau = float(rng.uniform(0.2, 1.0))
        alpha = np.stack([fn.random_potential(m, rng), fn.random_potential(m, rng)])
        A = np.stack([fn.random_potential(m, rng), fn.random_potential(m, rng)])
        st = var.RymState(m, A, float(rng.normal()) * 0.3)
        v = fn.conformal_variation(m, psi, h, sigma)
        pc = fn.normalize_potential(m, f, tau)
        pairs = {
            "delta_F": (fn.delta_F(m, f, v), fn.fd_delta_F(m, f, v, eps=eps)),
            "delta_W": (fn.delta_W(m, pc, v), fn.fd_delta_W(m, pc, v, eps=eps)),
            "delta_F_rym": (var.delta_F_rym(st, f, v, alpha), var.fd_delta_F_rym(st, f, v, alpha, eps)),
            "delta_W_rym": (var.delta_W_rym(st, pc, v, alpha), var.fd_delta_W_rym(st, pc, v, alpha, eps)),
        }
        row = [i]
        for key, (a, b) in pairs.items():
            e = _rel(a, b)
            worst[key] = max(worst[key], e)
            row += [a, b, e]
        rows.append(row)
    cols = ["index"]
    for key in worst:
        cols += [f"{key}", f"{key}_fd", f"{key}_rel"]
    rep.table("variations", cols, rows)
    for key, e in worst.items():
        rep.check(f"{key}/max_rel_error", e, tol, "<=")


# --------------------------------------------------------------------------
# lgeo_identities
# --------------------------------------------------------------------------


def _spacetimes(cfg: ExperimentConfig) -> dict:
    out = {}
    for kind in cfg["backends"]:
        if kind == "euclidean":
            out[kind] = lgeo.Spacetime(flow.run_history(Euclidean(2), cfg["flow.T"], flow.FlowConfig(dt=cfg["flow.T"] / 8)))
        elif kind == "sphere":
            out[kind] = lgeo.Spacetime(flow.run_history(RoundSphere(2, cfg["sphere.radius"]), cfg["flow.T"]))
        elif kind == "torus":
            out[kind] = lgeo.Spacetime(flow.run_history(_torus(cfg), cfg["flow.T"]))
        else:
            raise ValueError(f"unknown backend {kind!r}")
    return out


def _points(kind, cfg):
    """Base point and target for each backend."""
    if kind == "sphere":
        th = cfg["sphere.angle"]
        return np.array([0.0, 0.0, 1.0]), np.array([math.sin(th), 0.0, math.cos(th)])
    return np.array(cfg["p"]), np.array(cfg["q"])


def exp_lgeo_identities(cfg: ExperimentConfig, rep: RunReport):
    sts = {}

    def setup():
        sts.update(_spacetimes(cfg))

    _section(rep, "setup", setup)
    tb = cfg["tau_bar"]

    def exactness():
        rng = cfg.rng(4)
        worst_path = worst_L = worst_l = 0.0
        for n in (1, 2, 3):
            st = lgeo.Spacetime(flow.run_history(Euclidean(n), 1.0, flow.FlowConfig(dt=0.125)))
            for _ in range(3):
                p = rng.normal(size=n)
                q = p + rng.normal(size=n)
                tbar = float(rng.uniform(0.1, 0.9))
                path = lgeo.solve_bvp(st, p, q, tbar)
                v = path.v
                exact = p[None, :] + 2.0 * path.s[:, None] * v[None, :]
                worst_path = max(worst_path, float(np.max(np.abs(path.x - exact))))
                worst_path = max(worst_path, float(np.max(np.abs(path.endpoint - q))))
                d2 = float(np.sum((q - p) ** 2))
                L = lgeo.l_length(st, path)
                worst_L = max(worst_L, abs(L - d2 / (2.0 * math.sqrt(tbar))))
                rf = lgeo.reduced_field(st, p, tbar, q[None, :], workers=1)
                worst_l = max(worst_l, abs(float(rf.l[0]) - d2 / (4.0 * tbar)))
        rep.check("exactness/path", worst_path, cfg["tol.exact"])
        rep.check("exactness/L", worst_L, cfg["tol.exact"])
        rep.check("exactness/l", worst_l, cfg["tol.exact"])

    def frames():
        for kind, st in sts.items():
            p, q = _points(kind, cfg)
            path = lgeo.solve_bvp(st, p, q, tb, with_frame=True)
            fr = lgeo.transport_frame(st, path)
            rep.check(f"frames/{kind}_gram_deviation", fr.max_deviation, cfg["tol.exact"])

    def identities():
        rows = []
        keys = ("L_grad", "L_time", "l_time", "l_grad")
        for kind, st in sts.items():
            if kind == "euclidean":
                continue
            p, q = _points(kind, cfg)
            res = {d: lgeo.identity_residuals(st, p, q, tb, delta=d) for d in cfg["deltas"]}
            d0 = cfg["delta"]
            r0 = res[d0] if d0 in res else lgeo.identity_residuals(st, p, q, tb, delta=d0)
            for key in keys:
                rep.check(f"identities/{kind}_{key}", r0[key], cfg["tol.identity"])
                ds = sorted(res)
                coarse, fine = res[ds[-1]][key], res[ds[0]][key]
                if abs(coarse) > cfg["order_floor"]:
                    order = math.log(abs(coarse) / abs(fine)) / math.log(ds[-1] / ds[0])
                    rep.check(f"identities/{kind}_{key}_order", order, cfg["tol.order"], ">=")
                else:
                    rep.note(f"identities/{kind}_{key}_order", "residual at roundoff level on every stencil")
            rep.check(f"identities/{kind}_l_laplacian_slack", r0["l_lap_slack"], -cfg["tol.identity"], ">=")
            rep.check(f"identities/{kind}_L_laplacian_slack", r0["L_lap_slack"], -cfg["tol.identity"], ">=")
            rep.note(f"identities/{kind}_alternative_coefficients", {k: r0[k] for k in ("l_time_alt", "l_grad_alt", "l_lap_slack_alt")})
            for d in sorted(res):
                rows.append([d, kind] + [res[d][k] for k in keys] + [res[d]["l_lap_slack"], res[d]["L_lap_slack"]])
        rep.table("identities", ["delta", "backend", *keys, "l_lap_slack", "L_lap_slack"], rows)

    def hessian():
        for kind, st in sts.items():
            p, q = _points(kind, cfg)
            h = lgeo.hessian_bound_check(st, p, q, tb)
            if kind == "euclidean":
                rep.check("hessian/euclidean_equality", h["min_slack"], cfg["tol.hessian_equality"])
            else:
                rep.check(f"hessian/{kind}_min_slack", h["min_slack"], -cfg["tol.identity"], ">=")

    def jacobi():
        for kind, st in sts.items():
            p, q = _points(kind, cfg)
            path = lgeo.solve_bvp(st, p, q, tb)
            s = path.s
            sb = s[-1]
            E = st.tangent_basis(path.x)
            A = np.sin(math.pi * s / sb)[:, None] * E[:, 0]
            B = (s * (sb - s))[:, None] * (E[:, -1] + 0.3 * E[:, 0])
            a, b = lgeo.jacobi_pairing(st, path, A, B), lgeo.jacobi_pairing(st, path, B, A)
            rep.check(f"jacobi/{kind}_pairing_symmetry", _rel(a, b), cfg["tol.pairing"], "<=")
            sp = lgeo.speed_bound_check(st, path)
            rep.check(f"speed/{kind}_bound", sp["speed_ok"], None, "true")
            rep.check(f"speed/{kind}_distance_slack", sp["distance_slack"], -1e-12, ">=")

    for name, body in (("exactness", exactness), ("frames", frames), ("identities", identities), ("hessian", hessian), ("jacobi", jacobi)):
        if _wants(cfg, name):
            _section(rep, name, body)


# --------------------------------------------------------------------------
# reduced_volume
# --------------------------------------------------------------------------


def exp_reduced_volume(cfg: ExperimentConfig, rep: RunReport):
    bound_tol = cfg["tol.volume"]

    def euclidean():
        rows = []
        for n in cfg["euclidean.dims"]:
            st = lgeo.Spacetime(flow.run_history(Euclidean(n), max(cfg["euclidean.taus"]), flow.FlowConfig(dt=0.125)))
            res = lgeo.reduced_volume(st, np.zeros(n), cfg["euclidean.taus"])
            target = (4.0 * math.pi) ** (n / 2.0)
            for r in res["rows"]:
                rows.append([r["tau"], n, r["V"], r["min_l"]])
            rep.check(f"euclidean/V_n{n}", max(abs(r["V"] - target) for r in res["rows"]), cfg["tol.euclidean"])
            rep.check(f"euclidean/min_l_n{n}", max(r["min_l"] for r in res["rows"]), n / 2.0 + 0.05, "<=")
        rep.table("euclidean_volume", ["tau", "n", "V", "min_l"], rows)

    def sphere():
        h = flow.run_history(RoundSphere(2, cfg["sphere.radius"]), cfg["sphere.T"])
        st = lgeo.Spacetime(h)
        res = lgeo.reduced_volume(st, np.array([0.0, 0.0, 1.0]), cfg["sphere.taus"])
        V = [r["V"] for r in res["rows"]]
        rep.table("sphere_volume", ["tau", "V", "min_l", "failed"], [[r["tau"], r["V"], r["min_l"], r["failed"]] for r in res["rows"]])
        rep.check("sphere/min_l", max(r["min_l"] for r in res["rows"]), 1.0 + 0.05, "<=")
        rep.check("sphere/V_step_max", float(np.max(np.diff(V))), bound_tol, "<=")
        rep.check("sphere/V_excess", max(V) - res["bound"], bound_tol, "<=")
        rep.check("sphere/scalar_floor", -flow.scalar_floor(h)["min_slack"], cfg["tol.floor"], "<=")

    def torus():
        m = _torus(cfg)
        h = flow.run_history(m, cfg["torus.T"])
        st = lgeo.Spacetime(h)
        N = m.shape[0]
        X = np.arange(N) * m.hx
        Y = np.arange(m.shape[1]) * m.hy
        q = np.stack(np.meshgrid(X, Y, indexing="ij"), axis=-1).reshape(-1, 2)
        res = lgeo.reduced_volume(st, np.array(cfg["p"]), cfg["torus.taus"], targets=q)
        rows = [[r["tau"], r["V"], r["min_l"], r["failed"]] for r in res["rows"]]
        rep.table("torus_volume", ["tau", "V", "min_l", "failed"], rows)
        V = [r["V"] for r in res["rows"]]
        rep.check("torus/min_l", max(r["min_l"] for r in res["rows"]), 1.0 + 0.05, "<=")
        rep.check("torus/V_step_max", float(np.max(np.diff(V))), bound_tol, "<=")
        rep.check("torus/V_excess", max(V) - res["bound"], bound_tol, "<=")
        rep.check("torus/failed_targets", sum(r["failed"] for r in res["rows"]), 0, "<=")
        rep.check("torus/scalar_floor", -flow.scalar_floor(h)["min_slack"], cfg["tol.floor"], "<=")

    for name, body in (("euclidean", euclidean), ("sphere", sphere), ("torus", torus)):
        if _wants(cfg, name):
            _section(rep, name, body)


# --------------------------------------------------------------------------
# list_flow
# --------------------------------------------------------------------------


def _list_u(m, coeffs):
    X = geo.coordinates(m)
    x, y = X[..., 0], X[..., 1]
    return coeffs[0] * np.sin(x + y) + coeffs[1] * np.cos(y)


def exp_list_flow(cfg: ExperimentConfig, rep: RunReport):
    def reduction():
        rng = cfg.rng(5)
        m = _torus(cfg, cfg["reduction.resolution"])
        const = var.ListState(m, np.full(m.shape, 0.7))
        pc = fn.normalize_potential(m, fn.random_potential(m, rng), cfg["tau_bar"])
        rep.check("reduction/W", var.eval_W_list(const, pc) - fn.eval_W(m, pc), cfg["tol.reduction"])
        rep.check("reduction/production", var.production_W_list(const, pc) - fn.production_W(m, pc), cfg["tol.reduction"])
        a, b = var.mu_list(const, cfg["tau_bar"]).value, fn.mu(m, cfg["tau_bar"]).value
        rep.check("reduction/mu", a - b, cfg["tol.reduction"])
        st1 = var.step_list(const, 0.5 * flow.cfl_limit(m))
        m1 = flow.step_forward(m, 0.5 * flow.cfl_limit(m))
        rep.check("reduction/step", float(np.max(np.abs(st1.metric.u - m1.u))), cfg["tol.reduction"])

    def positivity():
        rng = cfg.rng(6)
        m = _torus(cfg, cfg["reduction.resolution"])
        vals = []
        for _ in range(cfg["random_states"]):
            st = var.ListState(m.with_u(m.u + fn.random_potential(m, rng, amplitude=0.1)), fn.random_potential(m, rng, amplitude=0.2))
            pc = fn.normalize_potential(st.metric, fn.random_potential(m, rng), float(rng.uniform(0.2, 1.0)))
            vals.append(min(var.production_W_list(st, pc, mode) for mode in var.LIST_MODES))
        rep.check("production/min_over_random_states", min(vals), 0.0, ">=")

    def trajectory():
        m = _torus(cfg)
        st0 = var.ListState(m, _list_u(m, cfg["u.coeffs"]))
        run = var.run_list(st0, cfg["flow.T"], defect_tol=cfg["defect_tol"])
        tr = var.list_trajectory(run, cfg["tau_bar"], np.zeros(m.shape))
        P = tr["production"][1:-1]
        err_c = float(np.max(np.abs(tr["rate_corrected"] - P) / np.abs(P)))
        err_r = float(np.max(np.abs(tr["rate"] - P) / np.abs(P)))
        rows = [[t, w, p, c] for t, w, p, c in zip(tr["t"], tr["W"], tr["production"], tr["correction"])]
        rep.table("list_W", ["t", "W_list", "production", "projection_correction"], rows)
        rep.check("trajectory/production_nonnegative", float(np.min(tr["production"])), 0.0, ">=")
        rep.check("trajectory/rate_vs_production", err_c, cfg["tol.production"], "<=", raw_rate_error=err_r)
        rep.check("trajectory/defect", tr["defect"], cfg["defect_tol"], "<=")
        rep.check("trajectory/max_u_nonincreasing", float(np.max(np.diff([np.max(np.abs(s.u)) for s in run.states]))), 0.0, "<=")
        idx = np.unique(np.linspace(0, len(run.states) - 1, cfg["mu.samples"]).round().astype(int))
        mus = []
        for k in idx:
            s = run.states[k]
            r = var.mu_list(s, cfg["tau_bar"] - s.t)
            rep.check(f"mu/converged_{k}", r.converged, None, "true")
            mus.append([s.t, r.value])
        rep.table("mu_list", ["t", "mu"], mus)
        rep.check("mu/min_step", float(np.min(np.diff([v for _, v in mus]))), -cfg["tol.mu"], ">=")

    def fixed_point():
        N = cfg["fixed.resolution"]
        m = ConformalTorus.flat(N)
        X = geo.coordinates(m)
        pert = []
        for eps in cfg["fixed.eps"]:
            st = var.ListState(m, eps * np.sin(2.0 * math.pi * X[..., 0] / m.lx))
            run = var.run_list(st, cfg["fixed.T"])
            end = run.states[-1]
            pert.append(float(np.max(np.abs(end.metric.u))))
            rep.check(f"fixed/u_decays_eps_{eps:g}", float(np.max(np.abs(end.u))) - float(np.max(np.abs(st.u))), 0.0, "<=")
        eps = cfg["fixed.eps"]
        orders = [math.log(pert[i] / pert[i + 1]) / math.log(eps[i] / eps[i + 1]) for i in range(len(eps) - 1)]
        rep.table("fixed_point", ["eps", "metric_perturbation"], [[e, p] for e, p in zip(eps, pert)])
        for o in orders:
            rep.check("fixed/perturbation_order", abs(o - 2.0), 0.05)

    for name, body in (("reduction", reduction), ("positivity", positivity), ("trajectory", trajectory), ("fixed", fixed_point)):
        if _wants(cfg, name):
            _section(rep, name, body)


# --------------------------------------------------------------------------
# rym_flow
# --------------------------------------------------------------------------


def _rym_A(m, coeffs):
    X = geo.coordinates(m)
    x, y = X[..., 0], X[..., 1]
    return np.stack([coeffs[0] * np.sin(y) + coeffs[1] * np.cos(x + y), coeffs[2] * np.cos(x)])


def exp_rym_flow(cfg: ExperimentConfig, rep: RunReport):
    def reduction():
        rng = cfg.rng(7)
        m = _torus(cfg, cfg["reduction.resolution"])
        st = var.RymState.trivial(m)
        f = fn.random_potential(m, rng)
        pc = fn.normalize_potential(m, f, cfg["tau_bar"])
        tol = cfg["tol.reduction"]
        rep.check("reduction/F", var.eval_F_rym(st, f) - fn.eval_F(m, f), tol)
        rep.check("reduction/W", var.eval_W_rym(st, pc) - fn.eval_W(m, pc), tol)
        rep.check("reduction/production_F", var.production_F_rym(st, f) - fn.production_F(m, f), tol)
        rep.check("reduction/lambda", var.lambda_rym(st).eigenvalue - fn.lambda_k(m).eigenvalue, tol)
        dt = 0.5 * flow.cfl_limit(m)
        rep.check("reduction/step", float(np.max(np.abs(var.step_rym(st, dt).metric.u - flow.step_forward(m, dt).u))), tol)
        c = cfg["uniform.curvature"]
        flat = ConformalTorus.flat(16)
        su = var.RymState.trivial(flat, flux=c / math.sqrt(2.0))
        f0 = np.full(flat.shape, math.log(geo.volume(flat)))
        rep.check("uniform/F", var.eval_F_rym(su, f0) + 0.25 * c * c, 1e-12)
        rep.check("uniform/lambda", var.lambda_rym(su).eigenvalue + 0.25 * c * c, 1e-9)

    def gauge_and_energy():
        rng = cfg.rng(8)
        m = _torus(cfg, cfg["reduction.resolution"])
        st = var.RymState(m, _rym_A(m, cfg["A.coeffs"]))
        chi = fn.random_potential(m, rng)
        a, b = st, st.gauge(chi)
        worst = 0.0
        dt = flow.cfl_limit(m)
        for _ in range(cfg["gauge.steps"]):
            a, b = var.step_rym(a, dt), var.step_rym(b, dt)
            worst = max(worst, float(np.max(np.abs(a.F12 - b.F12))))
        rep.check("gauge/F_trajectory", worst, cfg["tol.gauge"])
        s = var.RymState(ConformalTorus.flat(m.shape[0]), st.A)
        E = [var.ym_energy(s)]
        dt = flow.cfl_limit(s.metric)
        for _ in range(cfg["gauge.steps"]):
            s = var.step_rym(s, dt, freeze_metric=True)
            E.append(var.ym_energy(s))
        rep.table("ym_energy", ["step", "energy"], [[i, e] for i, e in enumerate(E)])
        rep.check("ym/energy_max_step", float(np.max(np.diff(E))), 0.0, "<=")

    def trajectory():
        m = _torus(cfg)
        st0 = var.RymState(m, _rym_A(m, cfg["A.coeffs"]))
        run = var.run_rym(st0, cfg["flow.T"])
        tr = var.rym_trajectory(run, np.zeros(m.shape))
        P = tr["production"][1:-1]
        rep.check("F/production_nonnegative", float(np.min(tr["production"])), 0.0, ">=")
        rep.check("F/rate_vs_production", float(np.max(np.abs(tr["rate"] - P) / np.abs(P))), cfg["tol.production"], "<=")
        rep.check("F/min_step", float(np.min(np.diff(tr["F"]))), -cfg["tol.monotone"], ">=")
        rep.table("rym_F", ["t", "F", "production"], [[t, F, p] for t, F, p in zip(tr["t"], tr["F"], tr["production"])])
        idx = np.unique(np.linspace(0, len(run.states) - 1, cfg["lambda.samples"]).round().astype(int))
        lam = [[run.states[k].t, var.lambda_rym(run.states[k]).eigenvalue] for k in idx]
        rep.table("lambda_rym", ["t", "lambda"], lam)
        rep.check("lambda/min_step", float(np.min(np.diff([v for _, v in lam]))), -cfg["tol.monotone"], ">=")
        # W rate: derived expression asserted, the bracket form reported
        T_end = cfg["W.T"]
        tw = var.rym_trajectory(run, np.zeros(m.shape), tau_bar=T_end)
        r = tw["rate"]
        d_err = float(np.max(np.abs(r - tw["derived"][1:-1]) / np.abs(r)))
        p_err = float(np.max(np.abs(r - tw["bracket"][1:-1]) / np.abs(r)))
        rep.check("W/rate_vs_derived_expression", d_err, cfg["tol.production"], "<=")
        rep.note("W/rate_vs_bracket_expression_rel_error", p_err)
        rep.table("rym_W", ["t", "W", "rate_bracket", "rate_derived"], [list(x) for x in zip(tw["t"], tw["W"], tw["bracket"], tw["derived"])])
        le = var.low_energy_check(run.states, T_end, r, tw["t"][1:-1])
        rep.note("low_energy/t0", le["t0"])
        rep.note("low_energy/decreasing_tail", le["decreasing_tail"])
        rep.table("low_energy", ["t", "scaled_sup_F2"], [[t, q] for t, q in zip(le["t"][:: max(1, len(le["t"]) // 32)], le["scaled_energy"][:: max(1, len(le["t"]) // 32)])])

    for name, body in (("reduction", reduction), ("gauge", gauge_and_energy), ("trajectory", trajectory)):
        if _wants(cfg, name):
            _section(rep, name, body)


# --------------------------------------------------------------------------
# Registry
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Experiment:
    run: object
    schema: dict
    description: str


_TORUS = {"resolution": ("int", 64), "metric.coeffs": ("floats", [0.1, 0.05, 0.0, 0.0]), "checks": ("strs", [])}

EXPERIMENTS = {
    "flow_monotonicity": Experiment(
        exp_flow_monotonicity,
        {
            **_TORUS,
            "backend": ("str", "torus"),
            "flow.T": ("float", 0.5),
            "samples": ("int", 11),
            "potential.coeffs": ("floats", [0.1, 0.1, 0.0]),
            "measure.resolutions": ("ints", [32, 64]),
            "euclidean.dims": ("ints", [1, 2, 3]),
            "euclidean.times": ("floats", [0.0, 0.25, 0.5]),
            "euclidean.t0": ("float", 1.0),
            "tol.law": ("float", 1e-8),
            "tol.measure": ("float", 1e-6),
            "tol.order": ("float", 1.95),
            "tol.slack": ("float", 1e-5),
            "tol.production": ("float", 1e-4),
        },
        "Coupled Ricci flow: F law on flat space, measure conservation, F and lambda monotonicity",
    ),
    "entropy_w": Experiment(
        exp_entropy_w,
        {
            **_TORUS,
            "resolution": ("int", 32),
            "soliton.dims": ("ints", [1, 2, 3]),
            "soliton.times": ("floats", [0.0, 0.25, 0.5]),
            "soliton.T": ("float", 1.0),
            "flat.count": ("int", 50),
            "flat.dims": ("ints", [1, 2]),
            "scaling.alphas": ("floats", [0.5, 2.0, 3.7]),
            "mu.resolution": ("int", 64),
            "mu.period": ("float", 0.5),
            "mu.taus": ("floats", [0.2, 0.1, 0.05, 0.02, 0.01]),
            "tol.soliton_W": ("float", 1e-9),
            "tol.soliton_production": ("float", 1e-10),
            "tol.flat": ("float", 1e-9),
            "tol.scaling": ("float", 1e-12),
        },
        "W entropy: Gaussian soliton, flat-space non-negativity, scaling, mu sweep",
    ),
    "spectral_sweep": Experiment(
        exp_spectral_sweep,
        {
            **_TORUS,
            "spectral.ks": ("floats", [1.0, 1.5, 2.0]),
            "spectral.taus": ("floats", [2.0, 1.0, 0.5]),
            "spectral.oracle_resolution": ("int", 32),
            "tol.residual": ("float", 1e-7),
            "tol.oracle": ("float", 1e-7),
        },
        "lambda_k and mu sweeps with a dense eigenvalue oracle",
    ),
    "variation_oracle": Experiment(
        exp_variation_oracle,
        {
            **_TORUS,
            "resolution": ("int", 32),
            "count": ("int", 20),
            "eps": ("float", 1e-5),
            "tol.relative": ("float", 1e-4),
        },
        "First variations of F, W, F_rym and W_rym against central differences",
    ),
    "lgeo_identities": Experiment(
        exp_lgeo_identities,
        {
            **_TORUS,
            "resolution": ("int", 32),
            "backends": ("strs", ["euclidean", "sphere", "torus"]),
            "flow.T": ("float", 0.3),
            "sphere.radius": ("float", 1.0),
            "sphere.angle": ("float", 0.7),
            "p": ("floats", [1.0, 2.0]),
            "q": ("floats", [1.6, 2.5]),
            "tau_bar": ("float", 0.2),
            "delta": ("float", 0.02),
            "deltas": ("floats", [0.02, 0.04]),
            "order_floor": ("float", 1e-9),
            "tol.exact": ("float", 1e-8),
            "tol.identity": ("float", 1e-3),
            "tol.order": ("float", 1.95),
            "tol.hessian_equality": ("float", 1e-6),
            "tol.pairing": ("float", 1e-4),
        },
        "L-geodesic exactness, transport frames, reduced-distance identities, Hessian bound",
    ),
    "reduced_volume": Experiment(
        exp_reduced_volume,
        {
            **_TORUS,
            "resolution": ("int", 32),
            "euclidean.dims": ("ints", [1, 2]),
            "euclidean.taus": ("floats", [0.25, 0.5, 1.0]),
            "sphere.radius": ("float", 1.0),
            "sphere.T": ("float", 0.3),
            "sphere.taus": ("floats", [0.05, 0.1, 0.2, 0.3]),
            "torus.T": ("float", 0.5),
            "torus.taus": ("floats", [0.1, 0.2, 0.3]),
            "p": ("floats", [1.0, 2.0]),
            "tol.euclidean": ("float", 1e-6),
            "tol.volume": ("float", 1e-4),
            "tol.floor": ("float", 1e-6),
        },
        "Reduced distance minimum, reduced volume bound and monotonicity, scalar floor",
    ),
    "list_flow": Experiment(
        exp_list_flow,
        {
            **_TORUS,
            "u.coeffs": ("floats", [0.03, 0.02]),
            "flow.T": ("float", 0.1),
            "tau_bar": ("float", 1.0),
            "defect_tol": ("float", var.DEFECT_TOL),
            "reduction.resolution": ("int", 32),
            "random_states": ("int", 20),
            "mu.samples": ("int", 6),
            "fixed.resolution": ("int", 32),
            "fixed.eps": ("floats", [1e-3, 5e-4]),
            "fixed.T": ("float", 0.05),
            "tol.reduction": ("float", 1e-12),
            "tol.production": ("float", 1e-3),
            "tol.mu": ("float", 1e-4),
        },
        "List flow: reductions, W_list production and monotonicity, mu_list",
    ),
    "rym_flow": Experiment(
        exp_rym_flow,
        {
            **_TORUS,
            "A.coeffs": ("floats", [0.3, 0.1, 0.2]),
            "flow.T": ("float", 0.1),
            "tau_bar": ("float", 0.5),
            "W.T": ("float", 1.0),
            "reduction.resolution": ("int", 32),
            "uniform.curvature": ("float", 0.8),
            "gauge.steps": ("int", 100),
            "lambda.samples": ("int", 9),
            "tol.reduction": ("float", 1e-12),
            "tol.gauge": ("float", 1e-10),
            "tol.production": ("float", 1e-3),
            "tol.monotone": ("float", 1e-4),
        },
        "Ricci Yang-Mills flow: reductions, gauge invariance, YM energy, F production, lambda",
    ),
}


def _prefixed(schema: dict, prefix: str) -> dict:
    return {f"{prefix}.{k}": v for k, v in schema.items()}


def exp_variant_suites(cfg: ExperimentConfig, rep: RunReport):
    """List and Ricci Yang-Mills suites in one run; sub-keys carry ``list.`` / ``rym.`` prefixes."""
    for prefix, name in (("list", "list_flow"), ("rym", "rym_flow")):
        vals = {k: cfg.values[k] for k in COMMON}
        vals.update({k[len(prefix) + 1 :]: v for k, v in cfg.values.items() if k.startswith(prefix + ".")})
        sub = ExperimentConfig(name, cfg.seed, vals, cfg.text, cfg.overrides)
        part = RunReport(sub)
        EXPERIMENTS[name].run(sub, part)
        for c in part.checks:
            rep.checks.append({**c, "name": f"{prefix}/{c['name']}"})
        for t, v in part.tables.items():
            rep.tables[f"{prefix}_{t}"] = v
        rep.info.update({f"{prefix}/{k}": v for k, v in part.info.items()})
        rep.timing.update({f"{prefix}/{k}": v for k, v in part.timing.items()})


EXPERIMENTS["variant_suites"] = Experiment(
    exp_variant_suites,
    {**_prefixed(EXPERIMENTS["list_flow"].schema, "list"), **_prefixed(EXPERIMENTS["rym_flow"].schema, "rym")},
    "List and Ricci Yang-Mills suites together (reductions, productions, mu_list, lambda_rym, YM energy)",
)


def run_experiment(cfg: ExperimentConfig) -> RunReport:
    """Execute the configured experiment; independent parts continue after an abort."""
    rep = RunReport(cfg)
    EXPERIMENTS[cfg.experiment].run(cfg, rep)
    if not rep.checks:
        rep.fail("run/no_checks", "no check was recorded; is the 'checks' selection valid?")
    return rep


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def _list_experiments() -> str:
    width = max(len(k) for k in EXPERIMENTS)
    return "\n".join(f"{k.ljust(width)}  {e.description}" for k, e in EXPERIMENTS.items()) + "\n"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="perelman-lab", description="Run a configured numerical experiment.")
    ap.add_argument("--list-experiments", action="store_true", help="list experiment names and exit")
    sub = ap.add_subparsers(dest="command")
    rp = sub.add_parser("run", help="run the experiment described by a config file")
    rp.add_argument("config", nargs="?", help="config file")
    rp.add_argument("--out", help="output directory")
    rp.add_argument("--seed", type=int, help="override the seed")
    rp.add_argument("--resolution", type=int, help="override the grid resolution")
    rp.add_argument("--list-experiments", action="store_true", dest="list_sub", help="list experiment names and exit")
    args = ap.parse_args(argv)
    if args.list_experiments or getattr(args, "list_sub", False):
        sys.stdout.write(_list_experiments())
        return 0
    if args.command != "run" or not args.config:
        ap.print_usage(sys.stderr)
        return 2
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        sys.stderr.write(f"cannot read config: {exc}\n")
        return 2
    try:
        cfg = load_config(text, {"seed": args.seed, "resolution": args.resolution})
    except ConfigError as exc:
        for e in exc.errors:
            sys.stderr.write(f"config error: {e}\n")
        return 2
    out = args.out or cfg["out"] or os.path.join("out", cfg.experiment)
    rep = run_experiment(cfg)
    try:
        emit_report(rep, out)
        _write_timing(rep, out)
    except OSError as exc:
        sys.stderr.write(f"cannot write report: {exc}\n")
        return 2
    for c in rep.checks:
        sys.stdout.write(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']} = {_cell(c['value'])}\n")
    sys.stdout.write(f"{sum(c['passed'] for c in rep.checks)}/{len(rep.checks)} checks passed; report in {out}\n")
    return 0 if rep.all_passed else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
