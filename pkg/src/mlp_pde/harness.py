"""Experiment runner: declarative config in, CSV + JSON sidecar out.

Modes
-----
convergence     weighted RMS error of the estimator against the closed form, per level
dimension-scan  instrumented work per realization across dimensions
em-rate         strong errors of coarse vs fine Euler paths on a shared Brownian path
cost-audit      every realization's ledger against the cost model and its bound
residual        Monte Carlo fixed-point residual of the closed form and of estimator candidates

All randomness derives from ``RandomKey(seed)``; the work partition does not
depend on the thread count, so outputs are byte-identical across ``--threads``
(wall-time column excepted).
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .cost import CostLedger, CostModelParams, reconcile
from .mlp import MlpParams, mlp_batch, mlp_candidate, schedule
from .oracle import config_hash, coupled_fine_reference, sfpe_residual
from .problem import BUILTIN_PROBLEMS, PdeProblem, lambda_weights, make_problem
from .rng import RandomKey

log = logging.getLogger("mlp_pde")

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "WeightedError",
    "estimate_weighted_error",
    "load_config",
    "parse_config_text",
    "run",
    "RunResult",
    "COLUMNS",
    "SCHEMA_VERSION",
    "MODES",
    "fit_loglog_slope",
]

SCHEMA_VERSION = 1
MODES = ("convergence", "dimension-scan", "em-rate", "cost-audit", "residual")
TERMINAL_CAP = 1e-3

COLUMNS = [
    "schema_version", "config_hash", "mode", "problem", "d", "n", "m", "K",
    "point", "t", "x", "nu", "quantity", "R", "mean", "stderr", "exact",
    "weighted_rms", "weighted_rms_se", "value", "failures",
    "instrumented_cost", "theoretical_cost", "cost_bound", "within_model", "within_bound",
    "wall_time",
]


class ConfigError(ValueError):
    """Bad configuration; the message names the offending line or field."""


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    problem: str
    mode: str
    problem_params: dict = field(default_factory=dict)
    levels: list = field(default_factory=lambda: [1, 2, 3])
    dimensions: list = field(default_factory=lambda: [1, 2, 4, 8, 16])
    grids: list = field(default_factory=lambda: [4, 8, 16, 32, 64])
    replications: int = 20
    points: list = field(default_factory=lambda: [{"t": 0.0, "x": [0.0]}])
    seed: int = 0
    m: float | None = None          # overrides schedule(n)
    K: int | None = None
    rounding: str = "ceil"
    fine_grid: int = 1024           # em-rate reference resolution
    paths: int = 10000              # em-rate coupled paths
    residual_paths: int = 2000      # residual mode, per evaluation
    residual_grid: int = 64
    epsilon: float | None = None    # practical N_eps analogue
    assertions: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a table/object")
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(raw) - known)
        if extra:
            raise ConfigError(f"field {extra[0]!r}: unknown field (known: {sorted(known)})")
        for req in ("problem", "mode"):
            if req not in raw:
                raise ConfigError(f"field {req!r}: required")
        cfg = cls(**raw)
        cfg._validate()
        return cfg

    def _validate(self):
        if self.problem not in BUILTIN_PROBLEMS:
            raise ConfigError(f"field 'problem': unknown id {self.problem!r}; "
                              f"choose from {sorted(BUILTIN_PROBLEMS)}")
        if self.mode not in MODES:
            raise ConfigError(f"field 'mode': must be one of {list(MODES)}, got {self.mode!r}")
        if not isinstance(self.problem_params, dict):
            raise ConfigError("field 'problem_params': must be a table")
        for name in ("levels", "dimensions", "grids"):
            v = getattr(self, name)
            if not isinstance(v, list) or not v or not all(isinstance(i, int) and not isinstance(i, bool) for i in v):
                raise ConfigError(f"field {name!r}: must be a nonempty list of integers")
        if any(n < 0 for n in self.levels):
            raise ConfigError("field 'levels': levels must be >= 0")
        if any(d < 1 for d in self.dimensions):
            raise ConfigError("field 'dimensions': dimensions must be >= 1")
        if any(k < 1 for k in self.grids):
            raise ConfigError("field 'grids': grid counts must be >= 1")
        for name in ("replications", "seed", "fine_grid", "paths", "residual_paths", "residual_grid"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"field {name!r}: must be a nonnegative integer")
        if self.replications < 1:
            raise ConfigError("field 'replications': must be >= 1")
        if self.rounding not in ("ceil", "round"):
            raise ConfigError("field 'rounding': must be 'ceil' or 'round'")
        if not isinstance(self.points, (list, dict)) or not self.points:
            raise ConfigError("field 'points': must be a nonempty list or a grid table")
        try:
            make_problem(self.problem, **self.problem_params)
        except TypeError as exc:
            raise ConfigError(f"field 'problem_params': {exc}") from None


def parse_config_text(text: str, fmt: str) -> ExperimentConfig:
    """Parse TOML or JSON text; syntax errors carry a line number."""
    if fmt == "json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    elif fmt == "toml":
        try:
            import tomllib  # type: ignore[import-not-found]
        except ModuleNotFoundError:
            import tomli as tomllib
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            line = getattr(exc, "lineno", None) or text.count("\n") + 1
            raise ConfigError(f"line {line}: TOML syntax error: {exc}") from None
    else:
        raise ConfigError(f"unknown config format {fmt!r}")
    return ExperimentConfig.from_dict(raw)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    fmt = "json" if path.suffix.lower() == ".json" else "toml"
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        return parse_config_text(text, fmt)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _resolve_points(cfg: ExperimentConfig, problem: PdeProblem) -> list[tuple[float, np.ndarray]]:
    d, T = problem.d, problem.T
    spec = cfg.points
    if isinstance(spec, dict):
        try:
            k = float(spec["radius"])
            per_axis = int(spec.get("per_axis", 3))
            times = [float(v) for v in spec["times"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"field 'points': grid spec needs radius and times ({exc})") from None
        if per_axis ** d > 10000:
            raise ConfigError("field 'points': grid has more than 10000 points")
        axis = np.linspace(-k, k, per_axis) if per_axis > 1 else np.zeros(1)
        pts = [(t, np.array(c, dtype=float)) for t in times for c in itertools.product(axis, repeat=d)]
    else:
        pts = []
        for i, p in enumerate(spec):
            try:
                t = float(p["t"])
                x = np.asarray(p["x"], dtype=float).reshape(-1)
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"field 'points[{i}]': needs t and x ({exc})") from None
            if x.size == 1 and d > 1:
                x = np.full(d, x[0])
            if x.size != d:
                raise ConfigError(f"field 'points[{i}].x': length {x.size} != d={d}")
            pts.append((t, x))
    for i, (t, _) in enumerate(pts):
        if not 0 <= t <= T - TERMINAL_CAP:
            raise ConfigError(f"field 'points[{i}].t': must lie in [0, T - {TERMINAL_CAP}]")
    return pts


# --------------------------------------------------------------------------
# error metric
# --------------------------------------------------------------------------

@dataclass
class WeightedError:
    rms: np.ndarray
    stderr: np.ndarray
    weights: np.ndarray


def estimate_weighted_error(estimates, exact, t: float, T: float) -> WeightedError:
    """``Lambda_nu(T - t) * sqrt(mean_i (pr_nu(U_i) - pr_nu(exact))^2)`` per component.

    The standard error of each RMS is the leave-one-out jackknife.
    """
    U = np.asarray(estimates, dtype=float)
    if U.ndim != 2 or U.shape[0] < 2:
        raise ValueError("need R >= 2 replications of shape (R, d+1)")
    R, k = U.shape
    w = lambda_weights(T - t, k - 1)
    sq = (U - np.asarray(exact, dtype=float)) ** 2
    total = sq.sum(axis=0)
    rms = np.sqrt(total / R)
    loo = np.sqrt((total[None, :] - sq) / (R - 1))
    se = np.sqrt((R - 1) / R * ((loo - loo.mean(axis=0)) ** 2).sum(axis=0))
    return WeightedError(w * rms, w * se, w)


def fit_loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, dtype=float)),
                            np.log(np.asarray(ys, dtype=float)), 1)[0])


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple, np.ndarray)):
        return ";".join(_fmt(e) for e in np.asarray(v).ravel().tolist())
    return str(v)


def _params_for(cfg: ExperimentConfig, n: int) -> MlpParams:
    if cfg.m is not None or cfg.K is not None or n == 0:
        base = schedule(max(n, 1))
        return MlpParams(n=n, m=cfg.m if cfg.m is not None else base.m,
                         K=cfg.K if cfg.K is not None else base.K, rounding=cfg.rounding)
    p = schedule(n)
    return MlpParams(n=n, m=p.m, K=p.K, rounding=cfg.rounding)


def _tree_sum(a: np.ndarray) -> np.ndarray:
    # pairwise reduction in index order; independent of scheduling
    a = np.asarray(a, dtype=float)
    if a.shape[0] == 0:
        return np.zeros(a.shape[1:])
    while a.shape[0] > 1:
        if a.shape[0] % 2:
            a = np.concatenate([a, np.zeros((1,) + a.shape[1:])])
        a = a[0::2] + a[1::2]
    return a[0]


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _base(cfg: ExperimentConfig) -> dict:
    return {"schema_version": SCHEMA_VERSION, "mode": cfg.mode, "problem": cfg.problem}


# --------------------------------------------------------------------------
# modes
# --------------------------------------------------------------------------

def _realizations(problem, params, t, x, key, R):
    """R realizations at one point; keys ``key ++ (0, r)``."""
    ests = mlp_batch(problem, params, [(t, x)], R, key)[0]
    vals = np.array([e.value for e in ests])
    fails = [e for e in ests if not e.ok]
    ledger = CostLedger()
    for e in ests:
        ledger.merge(e.ledger)
    return vals, fails, ledger, ests


def _mode_convergence(cfg, problem, points, threads):
    if problem.known_solution is None:
        raise ConfigError("field 'problem': convergence mode needs a closed-form solution")
    d, T = problem.d, problem.T
    units = CostModelParams.for_problem(d)
    items = [(n, pi) for n in cfg.levels for pi in range(len(points))]

    def work(item):
        n, pi = item
        t, x = points[pi]
        params = _params_for(cfg, n)
        t0 = time.perf_counter()
        key = RandomKey(cfg.seed).child(n, pi)
        vals, fails, ledger, ests = _realizations(problem, params, t, x, key, cfg.replications)
        exact = problem.known_solution(t, x)
        rep = [reconcile(e.ledger, params, units, d=d, strict=False) for e in ests]
        return params, vals, fails, ledger, exact, rep, time.perf_counter() - t0

    results = _map(work, items, threads)
    records, sup = [], {}
    failures = 0
    for (n, pi), (params, vals, fails, ledger, exact, rep, wall) in zip(items, results):
        t, x = points[pi]
        R = vals.shape[0]
        failures += len(fails)
        ok = np.all(np.isfinite(vals), axis=1)
        good = vals[ok]
        mean = _tree_sum(good) / len(good) if len(good) else np.full(d + 1, np.nan)
        sd = good.std(axis=0, ddof=1) if len(good) > 1 else np.full(d + 1, np.nan)
        err = estimate_weighted_error(good, exact, t, T) if len(good) > 1 else None
        inst = max(r.instrumented for r in rep)
        for nu in range(d + 1):
            rec = dict(_base(cfg), d=d, n=n, m=params.m, K=params.K, point=pi, t=t, x=x, nu=nu,
                       quantity="estimate", R=R, mean=mean[nu], stderr=sd[nu] / math.sqrt(len(good)),
                       exact=exact[nu],
                       weighted_rms=None if err is None else err.rms[nu],
                       weighted_rms_se=None if err is None else err.stderr[nu],
                       failures=len(fails), instrumented_cost=inst,
                       theoretical_cost=rep[0].theoretical, cost_bound=rep[0].upper_bound,
                       within_model=all(r.within_model for r in rep),
                       within_bound=all(r.within_bound for r in rep), wall_time=wall)
            records.append(rec)
            if err is not None:
                cur = sup.get(n)
                if cur is None or err.rms[nu] > cur[0]:
                    sup[n] = (float(err.rms[nu]), float(err.stderr[nu]), pi, nu)
    for n in cfg.levels:
        if n in sup:
            v, se, pi, nu = sup[n]
            records.append(dict(_base(cfg), d=d, n=n, point="sup", nu=nu, quantity="sup_weighted_rms",
                                R=cfg.replications, weighted_rms=v, weighted_rms_se=se, value=v))
    summary = {"sup_weighted_rms": {str(n): sup[n][0] for n in cfg.levels if n in sup},
               "sup_weighted_rms_se": {str(n): sup[n][1] for n in cfg.levels if n in sup}}
    if cfg.epsilon is not None:
        hit = [n for n in cfg.levels if n in sup and sup[n][0] < cfg.epsilon]
        summary["n_epsilon_point_set"] = min(hit) if hit else None
        summary["n_epsilon_note"] = ("smallest n whose sup over the configured point set is below "
                                     "epsilon; a practical analogue of the sup over the whole box")
    return records, summary, failures


_SCAN_QUANTITIES = ("normal_draws", "scalar_draws", "coeff_evals", "mu_applications",
                    "sigma_applications", "matrix_applications", "forward_paths")


def _mode_dimension_scan(cfg, _problem, points, threads):
    n = cfg.levels[0]
    params = _params_for(cfg, n)
    t, x0 = points[0]

    def work(d):
        prob = make_problem(cfg.problem, **dict(cfg.problem_params, d=d))
        x = np.full(d, float(x0[0]))
        t0 = time.perf_counter()
        key = RandomKey(cfg.seed).child(d)
        vals, fails, ledger, _ = _realizations(prob, params, t, x, key, cfg.replications)
        return ledger, len(fails), time.perf_counter() - t0

    results = _map(work, cfg.dimensions, threads)
    records, per = [], {q: [] for q in _SCAN_QUANTITIES}
    failures = 0
    for d, (ledger, nf, wall) in zip(cfg.dimensions, results):
        failures += nf
        row = ledger.as_dict()
        row["matrix_applications"] = ledger.mu_applications + ledger.sigma_applications
        for q in _SCAN_QUANTITIES:
            v = row[q] / cfg.replications
            per[q].append(v)
            records.append(dict(_base(cfg), d=d, n=n, m=params.m, K=params.K, point=0, t=t,
                                quantity=q, R=cfg.replications, value=v, failures=nf, wall_time=wall))
    summary = {"exponents": {}}
    if len(cfg.dimensions) >= 2:
        for q in _SCAN_QUANTITIES:
            if min(per[q]) > 0:
                summary["exponents"][q] = fit_loglog_slope(cfg.dimensions, per[q])
        for q, v in summary["exponents"].items():
            records.append(dict(_base(cfg), n=n, m=params.m, K=params.K, point="fit",
                                quantity=f"exponent_{q}", value=v))
    return records, summary, failures


def _mode_em_rate(cfg, problem, points, threads):
    t, x = points[0]
    T = problem.T

    def work(K):
        t0 = time.perf_counter()
        cp = coupled_fine_reference(problem, t, x, T, K, cfg.fine_grid,
                                    RandomKey(cfg.seed).child(7), paths=cfg.paths)
        out = {}
        for name, a, b in (("X_T", cp.X_coarse, cp.X_fine), ("V_T", cp.V_coarse, cp.V_fine)):
            sq = np.sum((a - b) ** 2, axis=1)
            ok = np.isfinite(sq)
            ms = float(_tree_sum(sq[ok]) / max(ok.sum(), 1))
            se_ms = float(sq[ok].std(ddof=1) / math.sqrt(max(ok.sum(), 1)))
            rms = math.sqrt(ms)
            out[name] = (rms, se_ms / (2 * rms) if rms > 0 else 0.0, int((~ok).sum()))
        return out, time.perf_counter() - t0

    if any(cfg.fine_grid % K for K in cfg.grids):
        raise ConfigError("field 'fine_grid': must be a multiple of every entry of 'grids'")
    results = _map(work, cfg.grids, threads)
    records, summary, failures = [], {"slopes": {}}, 0
    series = {"X_T": [], "V_T": []}
    for K, (out, wall) in zip(cfg.grids, results):
        for name, (rms, se, nf) in out.items():
            failures += nf
            series[name].append(rms)
            records.append(dict(_base(cfg), d=problem.d, K=K, point=0, t=t, x=x, quantity=f"strong_error_{name}",
                                R=cfg.paths, value=rms, stderr=se, failures=nf, wall_time=wall))
    if len(cfg.grids) >= 2:
        for name, ys in series.items():
            if min(ys) > 0:
                s = fit_loglog_slope(cfg.grids, ys)
                summary["slopes"][name] = s
                records.append(dict(_base(cfg), d=problem.d, point="fit", quantity=f"slope_{name}", value=s))
    return records, summary, failures


def _mode_cost_audit(cfg, problem, points, threads):
    d = problem.d
    units = CostModelParams.for_problem(d)
    items = [(n, pi) for n in cfg.levels for pi in range(len(points))]

    def work(item):
        n, pi = item
        t, x = points[pi]
        params = _params_for(cfg, n)
        t0 = time.perf_counter()
        _, fails, _, ests = _realizations(problem, params, t, x, RandomKey(cfg.seed).child(n, pi),
                                          cfg.replications)
        reps = [reconcile(e.ledger, params, units, d=d, strict=False) for e in ests]
        return params, reps, len(fails), time.perf_counter() - t0

    results = _map(work, items, threads)
    records, failures, viol = [], 0, 0
    for (n, pi), (params, reps, nf, wall) in zip(items, results):
        t, x = points[pi]
        failures += nf
        worst = max(reps, key=lambda r: r.instrumented)
        ok_m = all(r.within_model for r in reps)
        ok_b = all(r.within_bound for r in reps)
        viol += (not ok_m) + (not ok_b)
        records.append(dict(_base(cfg), d=d, n=n, m=params.m, K=params.K, point=pi, t=t, x=x,
                            quantity="cost", R=len(reps), failures=nf,
                            instrumented_cost=worst.instrumented, theoretical_cost=worst.theoretical,
                            cost_bound=worst.upper_bound, within_model=ok_m, within_bound=ok_b,
                            value=worst.instrumented, wall_time=wall))
    return records, {"violations": viol}, failures


def _mode_residual(cfg, problem, points, threads):
    d = problem.d
    Kr = cfg.residual_grid
    items = [("exact", pi) for pi in range(len(points)) if problem.known_solution is not None]
    items += [(n, pi) for n in cfg.levels for pi in range(len(points))]

    def work(item):
        n, pi = item
        t, x = points[pi]
        t0 = time.perf_counter()
        if n == "exact":
            res = sfpe_residual(problem, problem.known_solution, t, x, cfg.residual_paths, Kr,
                                RandomKey(cfg.seed).child(-1, pi))
            return [res.value], [res.stderr], time.perf_counter() - t0
        params = _params_for(cfg, n)
        vals, ses = [], []
        for r in range(cfg.replications):
            cand = mlp_candidate(problem, params, RandomKey(cfg.seed).child(n, pi, r))
            res = sfpe_residual(problem, cand, t, x, cfg.residual_paths, Kr,
                                RandomKey(cfg.seed).child(-2, n, pi, r))
            vals.append(res.value)
            ses.append(res.stderr)
        return vals, ses, time.perf_counter() - t0

    results = _map(work, items, threads)
    records, summary = [], {"rms_residual": {}}
    acc: dict = {}
    for (n, pi), (vals, ses, wall) in zip(items, results):
        t, x = points[pi]
        V = np.array(vals)
        mean = _tree_sum(V) / len(V)
        rms = np.sqrt(_tree_sum(V ** 2) / len(V))
        se = np.array(ses[0]) if len(V) == 1 else V.std(axis=0, ddof=1) / math.sqrt(len(V))
        w = lambda_weights(problem.T - t, d)
        for nu in range(d + 1):
            records.append(dict(_base(cfg), d=d, n=n, point=pi, t=t, x=x, nu=nu, quantity="residual",
                                R=len(V), mean=mean[nu], stderr=se[nu], weighted_rms=w[nu] * rms[nu],
                                K=Kr, wall_time=wall))
        acc.setdefault(str(n), []).append(float(np.max(w * rms)))
    for n, v in acc.items():
        summary["rms_residual"][n] = max(v)
    return records, summary, 0


_MODES = {
    "convergence": _mode_convergence,
    "dimension-scan": _mode_dimension_scan,
    "em-rate": _mode_em_rate,
    "cost-audit": _mode_cost_audit,
    "residual": _mode_residual,
}


# --------------------------------------------------------------------------
# assertions
# --------------------------------------------------------------------------

def _check(cfg: ExperimentConfig, summary: dict, records: list) -> list[tuple[str, bool, str]]:
    a = cfg.assertions
    out = []
    if cfg.mode == "convergence":
        sup = summary["sup_weighted_rms"]
        seq = [sup[str(n)] for n in cfg.levels if str(n) in sup]
        if a.get("decreasing", True) and len(seq) >= 2:
            ok = all(b < c for c, b in zip(seq, seq[1:]))
            out.append(("sup weighted error strictly decreasing in n", ok, f"{seq}"))
        if "max_error" in a:
            last = seq[-1] if seq else float("inf")
            out.append((f"sup weighted error at n={cfg.levels[-1]} < {a['max_error']}",
                        last < a["max_error"], f"{last}"))
    elif cfg.mode == "cost-audit":
        out.append(("every ledger within the model and the bound", summary["violations"] == 0,
                    f"violations={summary['violations']}"))
    elif cfg.mode == "em-rate":
        for name, default_tol in (("X_T", 0.15), ("V_T", 0.2)):
            s = summary["slopes"].get(name)
            target = a.get(f"slope_{name}", -0.5)
            tol = a.get(f"tol_{name}", default_tol)
            ok = s is not None and abs(s - target) <= tol
            out.append((f"strong-error slope of {name} in {target} +- {tol}", ok, f"{s}"))
    elif cfg.mode == "dimension-scan":
        e = summary["exponents"]
        if "normal_draws" in e:
            ok = abs(e["normal_draws"] - 1.0) <= a.get("tol", 0.1)
            out.append(("normal draws grow linearly in d", ok, f"{e['normal_draws']}"))
        if "matrix_applications" in e:
            ok = e["matrix_applications"] <= 2.0 + a.get("tol", 0.1)
            out.append(("matrix applications grow at most quadratically in d", ok,
                        f"{e['matrix_applications']}"))
    elif cfg.mode == "residual":
        for r in records:
            if r.get("n") == "exact":
                ok = abs(r["mean"]) <= 3 * r["stderr"] + a.get("bias_budget", 0.0)
                out.append((f"closed-form residual point {r['point']} nu {r['nu']} within 3 se",
                            ok, f"{r['mean']} +- {r['stderr']}"))
        rr = summary["rms_residual"]
        seq = [rr[str(n)] for n in cfg.levels if str(n) in rr]
        if len(seq) >= 2:
            out.append(("candidate residual decreasing in n", seq[-1] < seq[0], f"{seq}"))
    return out


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

@dataclass
class RunResult:
    records: list
    summary: dict
    checks: list
    failures: int
    csv_text: str
    sidecar: dict

    @property
    def ok(self) -> bool:
        return self.failures == 0 and all(c[1] for c in self.checks)


def _fingerprint() -> dict:
    import numba
    import scipy
    return {"python": sys.version.split()[0], "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "platform": platform.platform()}


def records_to_csv(records: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(COLUMNS)
    for r in records:
        w.writerow([_fmt(r.get(c)) for c in COLUMNS])
    return buf.getvalue()


def run(cfg: ExperimentConfig, threads: int = 1, out_dir=None) -> RunResult:
    """Execute ``cfg``; write ``results.csv`` and ``run.json`` into ``out_dir`` if given."""
    if threads < 1:
        raise ValueError("threads must be >= 1")
    problem = make_problem(cfg.problem, **cfg.problem_params)
    points = _resolve_points(cfg, problem)
    h = config_hash(cfg.to_dict())
    t0 = time.perf_counter()
    records, summary, failures = _MODES[cfg.mode](cfg, problem, points, threads)
    for r in records:
        r["config_hash"] = h
        log.info("%s", {k: r[k] for k in ("mode", "quantity", "n", "d", "K", "point", "nu") if k in r})
    checks = _check(cfg, summary, records)
    text = records_to_csv(records)
    sidecar = {"schema_version": SCHEMA_VERSION, "config": cfg.to_dict(), "config_hash": h,
               "summary": summary, "estimator_failures": failures,
               "checks": [{"name": n, "ok": ok, "detail": d} for n, ok, d in checks],
               "environment": _fingerprint(), "threads": threads,
               "wall_time": time.perf_counter() - t0}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "results.csv", "w", newline="") as fh:
            fh.write(text)
        (out / "run.json").write_text(json.dumps(sidecar, indent=2, default=_json_default) + "\n")
    return RunResult(records, summary, checks, failures, text, sidecar)


def _json_default(o: Any):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")
