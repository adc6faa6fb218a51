"""Reference computations that do not go through the MLP recursion.

* closed forms (from :attr:`PdeProblem.known_solution`);
* a 1-D Crank-Nicolson solver for the semilinear PDE;
* coarse/fine Euler paths driven by one Brownian path (strong errors);
* a Monte Carlo residual of the stochastic fixed-point equation;
* brute-force nested Picard iteration for tiny instances;
* JSON golden files keyed by a hash of the generating configuration.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import solve_banded

from .forward import GridMap, forward_batch
from .problem import PdeProblem
from .rng import RandomKey, child_digests, normal_rows, sample_arcsine, uniforms_at

__all__ = [
    "ReferenceSolution",
    "closed_form",
    "fd_solve_1d",
    "fd_picard_iterates_1d",
    "FdStabilityError",
    "CoupledPaths",
    "coupled_fine_reference",
    "ResidualEstimate",
    "sfpe_residual",
    "nested_picard",
    "NestedPicardRefused",
    "config_hash",
    "save_golden",
    "load_golden",
    "GoldenMismatch",
    "REGEN_ENV",
]

PROVENANCES = ("closed-form", "finite-difference", "nested-picard")


@dataclass(frozen=True)
class ReferenceSolution:
    evaluator: Callable
    provenance: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def __call__(self, t, x):
        return self.evaluator(t, x)


def closed_form(problem: PdeProblem) -> ReferenceSolution:
    if problem.known_solution is None:
        raise ValueError(f"problem {problem.name!r} has no closed form")
    return ReferenceSolution(problem.known_solution, "closed-form", {"problem": problem.name})


# --------------------------------------------------------------------------
# finite differences, d = 1
# --------------------------------------------------------------------------

class FdStabilityError(FloatingPointError):
    def __init__(self, message: str, suggested_nt: int):
        super().__init__(message)
        self.suggested_nt = suggested_nt


def fd_solve_1d(problem: PdeProblem, nt: int = 2000, nx: int = 801,
                domain_radius: float = 8.0, center: float = 0.0,
                frozen: Callable | None = None) -> ReferenceSolution:
    """Crank-Nicolson in backward time with the nonlinearity treated explicitly.

    The domain is ``center +- domain_radius * sigma(center) * sqrt(T)``.  The
    source ``f(t, x, v, v_x)`` is lagged and extrapolated to the half step
    (``1.5 F^n - 0.5 F^{n-1}``), which keeps the scheme second order without
    any nonlinear solve.  Boundary values come from the closed form when the
    problem has one, otherwise from linear extrapolation.  The result
    interpolates ``(v, v_x)`` bilinearly in ``(t, x)``.

    With ``frozen`` given, ``f`` reads ``frozen(t, x)`` instead of the
    solution itself, so the result is one Picard step ``Phi(frozen)`` and
    Dirichlet data come from extrapolation.
    """
    if problem.d != 1:
        raise ValueError("fd_solve_1d handles d = 1 only")
    if nt < 1 or nx < 5:
        raise ValueError("need nt >= 1 and nx >= 5")
    T = problem.T
    scale = abs(float(problem.sigma(np.array([[center]]))[0, 0, 0]))
    half = domain_radius * max(scale, 1e-12) * math.sqrt(T)
    xs = np.linspace(center - half, center + half, nx)
    dx = xs[1] - xs[0]
    dt = T / nt
    ts = np.linspace(0.0, T, nt + 1)
    X = xs[:, None]
    mu = problem.mu(X)[:, 0]
    sig2 = problem.sigma(X)[:, 0, 0] ** 2
    exact = problem.known_solution if frozen is None else None

    # L v = mu v_x + 1/2 sig^2 v_xx on interior nodes
    lo = 0.5 * sig2 / dx ** 2 - 0.5 * mu / dx
    di = -sig2 / dx ** 2
    up = 0.5 * sig2 / dx ** 2 + 0.5 * mu / dx

    ab = np.zeros((3, nx))
    ab[0, 2:] = -0.5 * dt * up[1:-1]
    ab[1, 1:-1] = 1.0 - 0.5 * dt * di[1:-1]
    ab[2, :-2] = -0.5 * dt * lo[1:-1]
    # boundary rows are identities; their values are set in the right-hand side
    ab[1, 0] = ab[1, -1] = 1.0

    def grad(v):
        g = np.empty_like(v)
        g[1:-1] = (v[2:] - v[:-2]) / (2 * dx)
        g[0] = (-3 * v[0] + 4 * v[1] - v[2]) / (2 * dx)
        g[-1] = (3 * v[-1] - 4 * v[-2] + v[-3]) / (2 * dx)
        return g

    def source(tk, v):
        w = (np.stack([v, grad(v)], axis=1) if frozen is None
             else np.asarray(frozen(np.full(nx, tk), X), dtype=float).reshape(nx, 2))
        return np.asarray(problem.f(np.full(nx, tk), X, w), dtype=float)

    V = np.empty((nt + 1, nx))
    V[nt] = problem.g(X)
    bound = 1e6 * max(1.0, float(np.max(np.abs(V[nt]))))
    F_prev = None
    F_cur = source(ts[nt], V[nt])
    for k in range(nt, 0, -1):
        v = V[k]
        Fs = F_cur if F_prev is None else 1.5 * F_cur - 0.5 * F_prev
        rhs = np.empty(nx)
        rhs[1:-1] = (v[1:-1] + 0.5 * dt * (lo[1:-1] * v[:-2] + di[1:-1] * v[1:-1]
                                             + up[1:-1] * v[2:]) + dt * Fs[1:-1])
        tn = ts[k - 1]
        if exact is not None:
            rhs[0] = exact(tn, xs[:1, None])[0, 0]
            rhs[-1] = exact(tn, xs[-1:, None])[0, 0]
        else:
            # linear extrapolation from the previous time level
            rhs[0] = 2 * v[1] - v[2]
            rhs[-1] = 2 * v[-2] - v[-3]
        V[k - 1] = solve_banded((1, 1), ab, rhs)
        if not np.all(np.isfinite(V[k - 1])) or np.max(np.abs(V[k - 1])) > bound:
            raise FdStabilityError(
                f"finite-difference solution blew up at t={tn:.4g}; try nt={4 * nt}", 4 * nt)
        F_prev, F_cur = F_cur, source(tn, V[k - 1])
    DV = np.stack([grad(V[k]) for k in range(nt + 1)])

    def evaluate(t, x):
        t = np.asarray(t, dtype=float)
        xq = np.asarray(x, dtype=float)[..., 0]
        t, xq = np.broadcast_arrays(t, xq)
        if np.any(xq < xs[0]) or np.any(xq > xs[-1]) or np.any(t < 0) or np.any(t > T):
            raise ValueError("query outside the finite-difference domain")
        ft = np.clip(t / dt, 0, nt)
        i = np.minimum(np.floor(ft).astype(int), nt - 1)
        a = ft - i
        fx = np.clip((xq - xs[0]) / dx, 0, nx - 1)
        j = np.minimum(np.floor(fx).astype(int), nx - 2)
        b = fx - j
        out = np.empty(t.shape + (2,))
        for c, G in enumerate((V, DV)):
            out[..., c] = ((1 - a) * ((1 - b) * G[i, j] + b * G[i, j + 1])
                           + a * ((1 - b) * G[i + 1, j] + b * G[i + 1, j + 1]))
        return out

    meta = {"nt": nt, "nx": nx, "domain": [float(xs[0]), float(xs[-1])],
            "problem": problem.name, "grid_t": ts, "grid_x": xs, "values": V}
    return ReferenceSolution(evaluate, "finite-difference", meta)


def fd_picard_iterates_1d(problem: PdeProblem, depth: int, nt: int = 1000, nx: int = 801,
                          domain_radius: float = 8.0) -> list[ReferenceSolution]:
    """Deterministic Picard iterates ``Phi^k(0)`` for ``k = 1..depth`` (d = 1).

    These are the targets of :func:`nested_picard`, and the means of the MLP
    estimator when ``f`` is affine in ``w`` and the forward scheme is exact.
    Away from the boundary the extrapolated Dirichlet data are harmless.
    """
    out: list[ReferenceSolution] = []
    prev: Callable = lambda t, x: np.zeros(np.shape(t) + (2,))
    for _ in range(depth):
        ref = fd_solve_1d(problem, nt, nx, domain_radius, frozen=prev)
        out.append(ref)
        prev = ref
    return out


# --------------------------------------------------------------------------
# coupled coarse / fine Euler paths
# --------------------------------------------------------------------------

@dataclass
class CoupledPaths:
    X_coarse: np.ndarray   # (P, d)
    X_fine: np.ndarray
    V_coarse: np.ndarray   # (P, d)
    V_fine: np.ndarray


def _cells(s: float, t: float, T: float, K: int) -> np.ndarray:
    pts = [i * T / K for i in range(K + 1) if s < i * T / K < t]
    return np.array([s] + pts + [t])


def _euler_given_increments(problem, s, x, times, dW):
    """Frozen Euler for ``(X, D, V)`` along cell boundaries ``times``.

    ``dW`` has shape ``(P, cells, d)``.  Written independently of the library
    stepper; it is the textbook recursion with explicit Jacobian columns.
    """
    P, n, d = dW.shape
    X = np.broadcast_to(np.asarray(x, dtype=float), (P, d)).copy()
    D = np.broadcast_to(np.eye(d), (P, d, d)).copy()   # D[p, :, k] = column k
    A = np.zeros((P, d))
    for j in range(n):
        h = times[j + 1] - times[j]
        w = dW[:, j]
        mu, sig, sinv = problem.mu(X), problem.sigma(X), problem.sigma_inv(X)
        newD = D.copy()
        for k in range(d):
            col = D[:, :, k]
            newD[:, :, k] += problem.d_mu(X, col) * h + np.einsum("pij,pj->pi", problem.d_sigma(X, col), w)
        # V integrand (sigma^{-1} D)^T dW
        A += np.einsum("pij,pi->pj", np.einsum("pik,pkj->pij", sinv, D), w)
        X = X + mu * h + np.einsum("pij,pj->pi", sig, w)
        D = newD
    return X, A / (times[-1] - s)


def coupled_fine_reference(problem: PdeProblem, s: float, x, t: float, K_coarse: int,
                           K_fine: int, key: RandomKey, paths: int | None = None) -> CoupledPaths:
    """Euler paths on two grids sharing one Brownian path.

    Fine-cell increments come from the stream of ``key`` (or of
    ``key ++ (p,)`` for ``p < paths``) in the canonical layout, so the fine path
    is the library's own path at resolution ``K_fine``; coarse increments are
    sums of the fine ones over each coarse cell.
    """
    if K_coarse < 1 or K_fine < 1 or K_fine % K_coarse:
        raise ValueError(f"K_fine={K_fine} must be a positive multiple of K_coarse={K_coarse}")
    if not 0 <= s < t <= problem.T:
        raise ValueError("need 0 <= s < t <= T")
    d = problem.d
    keys = [key] if paths is None else [key.child(p) for p in range(paths)]
    digests = np.array([k.digest for k in keys], dtype=np.uint64)
    fine = _cells(s, t, problem.T, K_fine)
    coarse = _cells(s, t, problem.T, K_coarse)
    nf = len(fine) - 1
    z = normal_rows(digests, nf * d).reshape(len(keys), nf, d)
    dWf = np.sqrt(np.diff(fine))[None, :, None] * z
    # each fine cell lies inside exactly one coarse cell
    owner = np.searchsorted(coarse, fine[:-1], side="right") - 1
    dWc = np.zeros((len(keys), len(coarse) - 1, d))
    for j in range(nf):
        dWc[:, owner[j]] += dWf[:, j]
    Xf, Vf = _euler_given_increments(problem, s, x, fine, dWf)
    Xc, Vc = _euler_given_increments(problem, s, x, coarse, dWc)
    if paths is None:
        return CoupledPaths(Xc[0], Xf[0], Vc[0], Vf[0])
    return CoupledPaths(Xc, Xf, Vc, Vf)


# --------------------------------------------------------------------------
# fixed-point residual
# --------------------------------------------------------------------------

@dataclass
class ResidualEstimate:
    value: np.ndarray
    stderr: np.ndarray
    M: int


def sfpe_residual(problem: PdeProblem, candidate: Callable, t: float, x, M: int, K: int,
                  key: RandomKey, chunk: int = 20000) -> ResidualEstimate:
    """Monte Carlo estimate of ``Phi(candidate)(t, x) - candidate(t, x)``.

    Path ``i`` uses stream ``key ++ (i,)``: its uniform 0 gives the interior
    time ``s``, and the same Brownian path is read at ``s`` and at ``T``.
    ``candidate(s, X)`` takes ``(P,)`` times and ``(P, d)`` states.
    """
    if M < 2:
        raise ValueError("need M >= 2 paths")
    T, d = problem.T, problem.d
    x = np.asarray(x, dtype=float).reshape(d)
    grid = GridMap(T, K)
    total = np.zeros(d + 1)
    total2 = np.zeros(d + 1)
    for start in range(0, M, chunk):
        idx = np.arange(start, min(M, start + chunk))
        dig = np.array([key.child(int(i)).digest for i in idx], dtype=np.uint64)
        P = idx.size
        r = sample_arcsine(u=uniforms_at(dig, 0))
        s = t + (T - t) * r
        # a proxy time rounded onto t or T has weight exactly 0
        live = (s > t) & (s < T)
        s = np.where(live, s, T)
        q = np.stack([s, np.full(P, T)], axis=1)
        fb = forward_batch(problem, grid, np.full(P, t), np.broadcast_to(x, (P, d)), q, dig)
        Xs, Zs, XT, ZT = fb.X[:, 0], fb.Z[:, 0], fb.X[:, 1], fb.Z[:, 1]
        interior = np.zeros((P, d + 1))
        if live.any():
            sl = s[live]
            w = np.asarray(candidate(sl, Xs[live]), dtype=float).reshape(-1, d + 1)
            weight = np.pi * np.sqrt((T - sl) * (sl - t))
            fval = np.asarray(problem.f(sl, Xs[live], w), dtype=float)
            interior[live] = (fval * weight)[:, None] * Zs[live]
        sample = np.asarray(problem.g(XT), dtype=float)[:, None] * ZT + interior
        total += sample.sum(axis=0)
        total2 += (sample ** 2).sum(axis=0)
    mean = total / M
    var = np.maximum(total2 / M - mean ** 2, 0.0) * M / (M - 1)
    own = np.asarray(candidate(np.array([t]), x[None]), dtype=float).reshape(d + 1)
    return ResidualEstimate(mean - own, np.sqrt(var / M), M)


# --------------------------------------------------------------------------
# nested Picard
# --------------------------------------------------------------------------

class NestedPicardRefused(RuntimeError):
    pass


MAX_NESTED_STEPS = 10 ** 9


def nested_picard(problem: PdeProblem, depth: int, samples_per_level, t: float, x,
                  key: RandomKey, K: int = 16, max_steps: int = MAX_NESTED_STEPS) -> np.ndarray:
    """Naive nested Monte Carlo for ``Phi^depth(0)(t, x)``.

    ``samples_per_level`` is an int or one count per depth (outermost
    first).  Every inner evaluation simulates fresh paths: sample ``i`` of a
    node with key ``k`` uses stream ``k ++ (i,)`` for its interior time, its
    path and the key of its inner evaluation.  Cost is the product of the
    counts; projected work beyond ``max_steps`` forward steps is refused.
    """
    if depth < 0 or depth > 3:
        raise ValueError(f"depth must be in 0..3, got {depth}")
    if problem.d > 2:
        raise ValueError("nested Picard is limited to d <= 2")
    d, T = problem.d, problem.T
    x = np.asarray(x, dtype=float).reshape(d)
    if depth == 0:
        return np.zeros(d + 1)
    counts = ([int(samples_per_level)] * depth if np.ndim(samples_per_level) == 0
              else [int(c) for c in samples_per_level])
    if len(counts) < depth or min(counts[:depth]) < 1:
        raise ValueError("need a positive sample count for every level")
    work, rows = 0, 1
    for c in counts[:depth]:
        rows *= c
        work += rows * (K + 1)
    if work > max_steps:
        raise NestedPicardRefused(f"projected work {work} forward steps exceeds {max_steps}")
    grid = GridMap(T, K)

    def phi(level, tt, xx, dig):
        B = tt.shape[0]
        if level == 0:
            return np.zeros((B, d + 1))
        N = counts[depth - level]
        cd = child_digests(dig, 0, np.arange(N)).reshape(-1)
        t_rep = np.repeat(tt, N)
        x_rep = np.repeat(xx, N, axis=0)
        r = sample_arcsine(u=uniforms_at(cd, 0))
        s = t_rep + (T - t_rep) * r
        live = (s > t_rep) & (s < T)
        s = np.where(live, s, T)
        q = np.stack([s, np.full(B * N, T)], axis=1)
        fb = forward_batch(problem, grid, t_rep, x_rep, q, cd)
        Xs, Zs, XT, ZT = fb.X[:, 0], fb.Z[:, 0], fb.X[:, 1], fb.Z[:, 1]
        interior = np.zeros((B * N, d + 1))
        if live.any():
            sl, Xl = s[live], Xs[live]
            w = phi(level - 1, sl, Xl, cd[live])
            weight = np.pi * np.sqrt((T - sl) * (sl - t_rep[live]))
            interior[live] = (np.asarray(problem.f(sl, Xl, w), dtype=float) * weight)[:, None] * Zs[live]
        sample = np.asarray(problem.g(XT), dtype=float)[:, None] * ZT + interior
        return sample.reshape(B, N, d + 1).mean(axis=1)

    return phi(depth, np.array([float(t)]), x[None], np.array([key.digest], dtype=np.uint64))[0]


# --------------------------------------------------------------------------
# golden files
# --------------------------------------------------------------------------

REGEN_ENV = "MLP_PDE_REGEN_GOLDEN"


class GoldenMismatch(RuntimeError):
    pass


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_golden(path, config: dict, values: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"config": config, "config_hash": config_hash(config), "values": values}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_golden(path, config: dict, compute: Callable | None = None,
                regenerate: bool | None = None) -> dict:
    """Frozen values for ``config``.

    The file is (re)written from ``compute()`` only when ``regenerate`` is set
    (or the ``MLP_PDE_REGEN_GOLDEN`` environment variable is 1).  A stored
    hash that does not match ``config`` raises :class:`GoldenMismatch`.
    """
    path = Path(path)
    if regenerate is None:
        regenerate = os.environ.get(REGEN_ENV) == "1"
    if regenerate:
        if compute is None:
            raise ValueError("regeneration needs a compute callable")
        save_golden(path, config, compute())
    if not path.exists():
        raise FileNotFoundError(f"golden file {path} missing; set {REGEN_ENV}=1 to create it")
    doc = json.loads(path.read_text())
    if doc.get("config_hash") != config_hash(config):
        raise GoldenMismatch(f"{path} was generated for a different configuration")
    return doc["values"]
