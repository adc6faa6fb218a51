"""Multilevel Picard estimator of the value and spatial gradient.

``U_n(t, x)`` for ``n >= 1`` is

    (g(x), 0) + 1/M_n sum_i (g(X_T^i) - g(x)) Z_T^i
      + sum_{l<n} 1/M_{n-l} sum_i [f(s_i, X_{s_i}, U_l^{+}) - 1{l>=1} f(s_i, X_{s_i}, U_{l-1}^{-})]
                                  Z_{s_i} / rho(t, s_i)

with ``M_k = rounding(m**k)``, ``s_i = t + (T - t) r_i`` and ``U_0 = U_{-1} = 0``.
Terminal sample ``i`` uses stream ``theta ++ (0, -i)``; level sample ``(l, i)``
uses stream ``theta ++ (l, i)`` for its proxy time and path, evaluates the
upper level with index ``theta ++ (l, i)`` and the lower level with
``theta ++ (l, -i)``.  Both levels see the same ``(s_i, X_{s_i})`` and share
the weight ``Z_{s_i}``.

The recursion is evaluated breadth-wise: one call handles a whole batch of
``(t, x, theta)`` rows, so the number of Python-level calls depends only on
``n`` and not on the number of samples.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .cost import CostLedger, sample_count
from .forward import GridMap, forward_batch
from .problem import PdeProblem
from .rng import RandomKey, child_digests, sample_arcsine, uniforms_at

__all__ = [
    "MlpParams",
    "Estimate",
    "EstimatorFailure",
    "schedule",
    "mlp_estimate",
    "mlp_batch",
    "recursive_call_count",
    "mlp_candidate",
    "MAX_SCHEDULE_LEVEL",
]

MAX_SCHEDULE_LEVEL = 20


class EstimatorFailure(FloatingPointError):
    """A non-finite intermediate; ``path`` reproduces the offending sample."""

    def __init__(self, message: str, path: tuple = ()):
        super().__init__(message)
        self.path = tuple(path)


@dataclass(frozen=True)
class MlpParams:
    n: int
    m: float
    K: int
    rounding: str = "ceil"

    def __post_init__(self):
        if self.n < -1:
            raise ValueError(f"level must be >= -1, got {self.n}")
        if not self.m > 0:
            raise ValueError(f"branching base must be positive, got {self.m}")
        if int(self.K) < 1:
            raise ValueError(f"grid count must be >= 1, got {self.K}")
        if self.rounding not in ("ceil", "round"):
            raise ValueError(f"unknown rounding policy {self.rounding!r}")

    def count(self, k: int) -> int:
        return sample_count(self.m, k, self.rounding)


def schedule(n: int, allow_large: bool = False) -> MlpParams:
    """``(n, n^(1/3), ceil(n^(n/3)))`` with ceil rounding of sample counts."""
    if n < 1:
        raise ValueError(f"schedule needs n >= 1, got {n}")
    if n >= MAX_SCHEDULE_LEVEL and not allow_large:
        raise ValueError(f"n={n} is beyond desk scale; pass allow_large=True to insist")
    m = n ** (1.0 / 3.0)
    return MlpParams(n=n, m=m, K=sample_count(m, n, "ceil"), rounding="ceil")


@dataclass
class Estimate:
    value: np.ndarray
    ledger: CostLedger
    key: Optional[RandomKey] = None
    blocks: dict = field(default_factory=dict)
    failure: Optional[EstimatorFailure] = None

    @property
    def ok(self) -> bool:
        return self.failure is None


class _Run:
    """Shared state of one batched evaluation (counters are per root row)."""

    def __init__(self, problem, params, n_roots, inner=None, track_blocks=False):
        self.problem = problem
        self.params = params
        self.grid = GridMap(problem.T, params.K)
        self.n_roots = n_roots
        self.counts = {f: np.zeros(n_roots, dtype=np.int64) for f in CostLedger.__dataclass_fields__}
        self.first_failure: dict[int, tuple] = {}
        self.inner = inner
        self.track_blocks = track_blocks
        self.blocks: dict = {}

    def add(self, name, roots, weights=None):
        self.counts[name] += np.bincount(roots, weights=weights, minlength=self.n_roots).astype(np.int64)

    def charge_forward(self, roots, fb):
        d = self.problem.d
        self.add("forward_paths", roots)
        self.add("euler_steps", roots, fb.steps)
        self.add("normal_draws", roots, fb.steps * d)
        self.add("mu_evals", roots, fb.freeze_points)
        self.add("sigma_evals", roots, fb.freeze_points)
        self.add("mu_applications", roots, fb.freeze_points * (1 + d))
        self.add("sigma_applications", roots, fb.freeze_points * (2 + d))
        if fb.degenerate is not None and fb.degenerate.any():
            self.add("degenerate_weights", roots, fb.degenerate)

    def note_failures(self, contrib, roots, paths, ell, signed_i):
        bad = ~np.all(np.isfinite(contrib), axis=-1)
        if not bad.any():
            return
        for r in np.nonzero(bad)[0]:
            root = int(roots[r])
            if root not in self.first_failure:
                self.first_failure[root] = tuple(int(v) for v in paths[r]) + (ell, int(signed_i[r]))

    def ledger(self, root: int) -> CostLedger:
        return CostLedger(**{k: int(v[root]) for k, v in self.counts.items()})


def _sum_rows(contrib, B, M):
    # fixed left-to-right order over samples
    c = contrib.reshape(B, M, -1)
    acc = c[:, 0].copy()
    for i in range(1, M):
        acc += c[:, i]
    return acc


def _level_samples(run, ell, tt, xx, s, kd, km, rr, paths, M, B, idx, depth, sel=None):
    """Summands ``(f(U_l) - f(U_{l-1})) Z_s / rho(t, s)`` for the live rows of one level block."""
    problem = run.problem
    T = problem.T
    fb = forward_batch(problem, run.grid, tt, xx, s[:, None], kd)
    run.charge_forward(rr, fb)
    Xs, Zs = fb.X[:, 0], fb.Z[:, 0]
    child_paths = np.concatenate(
        [np.repeat(paths, M, axis=0), np.tile(np.stack([np.full(M, ell), idx], 1), (B, 1))], axis=1)
    if sel is not None:
        child_paths = child_paths[sel]
    if run.inner is not None:
        w_up = run.inner(ell, s, Xs)
    else:
        w_up = _evaluate(run, ell, s, Xs, kd, rr, child_paths, depth + 1)
    df = np.asarray(problem.f(s, Xs, w_up), dtype=float)
    run.add("f_evals", rr)
    if ell >= 1:
        if run.inner is not None:
            w_dn = run.inner(ell - 1, s, Xs)
        else:
            neg_paths = child_paths.copy()
            neg_paths[:, -1] = -neg_paths[:, -1]
            w_dn = _evaluate(run, ell - 1, s, Xs, km, rr, neg_paths, depth + 1)
        df = df - np.asarray(problem.f(s, Xs, w_dn), dtype=float)
        run.add("f_evals", rr)
    dens = 1.0 / (np.pi * np.sqrt((T - s) * (s - tt)))
    return (df / dens)[:, None] * Zs


def _evaluate(run: _Run, n: int, t, x, digests, roots, paths, depth: int = 0):
    problem, params = run.problem, run.params
    d, T = problem.d, problem.T
    B = t.shape[0]
    run.add("recursive_calls", roots)
    out = np.zeros((B, d + 1))
    if n <= 0 or B == 0:
        return out

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        gx = np.asarray(problem.g(x), dtype=float)
        run.add("g_evals", roots)
        out[:, 0] = gx

        # terminal block
        M0 = params.count(n)
        idx = np.arange(1, M0 + 1)
        cd = child_digests(digests, 0, -idx).reshape(-1)
        rr = np.repeat(roots, M0)
        fb = forward_batch(problem, run.grid, np.repeat(t, M0), np.repeat(x, M0, axis=0),
                           np.full((B * M0, 1), T), cd)
        run.charge_forward(rr, fb)
        gXT = np.asarray(problem.g(fb.X[:, 0]), dtype=float)
        run.add("g_evals", rr)
        contrib = (gXT - np.repeat(gx, M0))[:, None] * fb.Z[:, 0]
        run.note_failures(contrib, rr, np.repeat(paths, M0, axis=0), 0, np.tile(-idx, B))
        term = _sum_rows(contrib, B, M0) / M0
        out += term
        if run.track_blocks and depth == 0:
            run.blocks["terminal"] = term.copy()

        for ell in range(n):
            M = params.count(n - ell)
            idx = np.arange(1, M + 1)
            kd = child_digests(digests, ell, idx).reshape(-1)
            km = child_digests(digests, ell, -idx).reshape(-1) if ell >= 1 else kd
            rr = np.repeat(roots, M)
            tt = np.repeat(t, M)
            r = sample_arcsine(u=uniforms_at(kd, 0))
            run.add("uniform_draws", rr)
            s = tt + (T - tt) * r
            # within a few ulps of T the proxy time can round onto t or T; the
            # weight pi sqrt((T-s)(s-t)) is then exactly 0 and the sample is dropped
            live = (s > tt) & (s < T)
            contrib = np.zeros((B * M, problem.d + 1))
            if live.all():
                contrib[:] = _level_samples(run, ell, tt, np.repeat(x, M, axis=0), s, kd, km,
                                            rr, paths, M, B, idx, depth)
            elif live.any():
                sel = np.nonzero(live)[0]
                contrib[sel] = _level_samples(run, ell, tt[sel], np.repeat(x, M, axis=0)[sel], s[sel],
                                              kd[sel], km[sel], rr[sel], paths, M, B, idx,
                                              depth, sel)
            run.note_failures(contrib, rr, np.repeat(paths, M, axis=0), ell, np.tile(idx, B))
            blk = _sum_rows(contrib, B, M) / M
            out += blk
            if run.track_blocks and depth == 0:
                run.blocks[ell] = blk.copy()
    return out


def _run_roots(problem, params, t, x, keys: Sequence[RandomKey], inner=None, track_blocks=False):
    R = len(keys)
    run = _Run(problem, params, R, inner=inner, track_blocks=track_blocks)
    digests = np.array([k.digest for k in keys], dtype=np.uint64)
    # paths are relative to each root key; callers re-attach the prefix
    paths = np.zeros((R, 0), dtype=np.int64)
    vals = _evaluate(run, params.n, np.asarray(t, dtype=float), np.asarray(x, dtype=float),
                     digests, np.arange(R), paths)
    return vals, run


def mlp_estimate(problem: PdeProblem, params: MlpParams, t: float, x, key: RandomKey,
                 ledger: CostLedger | None = None, inner: Callable | None = None,
                 raise_on_failure: bool = True) -> Estimate:
    """One realization of ``U_n(t, x)`` indexed by ``key``.

    ``ledger``, when given, is merged with this run's counters.  ``inner``
    replaces the recursive evaluations: ``inner(level, s, X_s)`` must return
    an array of shape ``(len(s), d+1)``; used to probe the level coupling.
    """
    if not 0 <= t < problem.T:
        raise ValueError(f"t must lie in [0, T), got {t}")
    x = np.asarray(x, dtype=float).reshape(1, problem.d)
    vals, run = _run_roots(problem, params, np.array([float(t)]), x, [key], inner=inner,
                           track_blocks=True)
    led = run.ledger(0)
    if ledger is not None:
        ledger.merge(led)
    est = Estimate(value=vals[0], ledger=led, key=key, blocks={k: v[0] for k, v in run.blocks.items()})
    if not np.all(np.isfinite(vals[0])):
        path = key.path + run.first_failure.get(0, ())
        est.failure = EstimatorFailure(f"non-finite estimate; offending sample path {path}", path)
        if raise_on_failure:
            raise est.failure
    return est


def mlp_batch(problem: PdeProblem, params: MlpParams, points, R: int, base_key: RandomKey,
              max_paths: int = 400_000) -> list[list[Estimate]]:
    """``R`` independent realizations at each ``(t, x)`` point.

    Realization ``r`` at point ``p`` uses key ``base_key ++ (p, r)``.  Roots
    are evaluated in chunks of bounded size; results do not depend on the
    chunking.  Failures are attached to their Estimate instead of raised.
    """
    if R < 1:
        raise ValueError(f"need at least one replication, got {R}")
    pts = [(float(tp), np.asarray(xp, dtype=float).reshape(problem.d)) for tp, xp in points]
    for tp, _ in pts:
        if not 0 <= tp < problem.T:
            raise ValueError(f"t must lie in [0, T), got {tp}")
    jobs = [(p, r) for p in range(len(pts)) for r in range(R)]
    keys = [base_key.child(p, r) for p, r in jobs]
    per_root = max(1, recursive_call_count(params)[1])
    chunk = max(1, max_paths // per_root)
    out: list[list[Estimate]] = [[None] * R for _ in pts]
    for start in range(0, len(jobs), chunk):
        sl = slice(start, start + chunk)
        js, ks = jobs[sl], keys[sl]
        t = np.array([pts[p][0] for p, _ in js])
        x = np.stack([pts[p][1] for p, _ in js])
        vals, run = _run_roots(problem, params, t, x, ks)
        for j, ((p, r), k) in enumerate(zip(js, ks)):
            est = Estimate(value=vals[j], ledger=run.ledger(j), key=k)
            if not np.all(np.isfinite(vals[j])):
                path = k.path + run.first_failure.get(j, ())
                est.failure = EstimatorFailure(f"non-finite estimate; offending sample path {path}", path)
            out[p][r] = est
    return out


def recursive_call_count(params: MlpParams) -> tuple[int, int]:
    """Closed-form ``(calls, forward paths)`` of one realization.

    ``calls(n) = 1 + sum_l M_{n-l} (calls(l) + 1{l>=1} calls(l-1))`` with
    ``calls(n <= 0) = 1`` counts every evaluation of ``U`` including the top
    one and the trivial level-0 ones.
    """
    memo: dict = {}

    def rec(n):
        if n <= 0:
            return 1, 0
        if n in memo:
            return memo[n]
        calls, paths = 1, params.count(n)
        for ell in range(n):
            M = params.count(n - ell)
            c_up, p_up = rec(ell)
            calls += M * c_up
            paths += M * (1 + p_up)
            if ell >= 1:
                c_dn, p_dn = rec(ell - 1)
                calls += M * c_dn
                paths += M * p_dn
        memo[n] = (calls, paths)
        return memo[n]

    return rec(params.n)


def _point_key(key: RandomKey, s: float, x: np.ndarray) -> RandomKey:
    # a deterministic key per evaluation point, from the bit patterns of (s, x)
    words = struct.unpack(f"<{1 + x.size}q", struct.pack(f"<{1 + x.size}d", s, *x.tolist()))
    return key.child(*words)


def mlp_candidate(problem: PdeProblem, params: MlpParams, key: RandomKey):
    """A frozen estimator realization as a function of ``(s, X)``.

    The realization at a point is keyed by the bits of the point, so repeated
    calls agree and distinct points are independent.
    """
    def candidate(s, X):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        X = np.asarray(X, dtype=float).reshape(s.size, problem.d)
        keys = [_point_key(key, float(si), xi) for si, xi in zip(s, X)]
        vals, _ = _run_roots(problem, params, s, X, keys)
        return vals
    return candidate
