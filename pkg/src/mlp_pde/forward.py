"""Frozen-coefficient Euler-Maruyama for the forward, derivative and weight processes.

Coefficients are frozen at ``max(s, floor_K(r))``: on every cell between
consecutive events (start, interior grid points, query times) the increments
of X, D and the weight accumulator are exact affine functions of one Gaussian
increment.  Inserting a query time splits a cell without changing the law.

Batched routines take one start ``(t_b, x_b)``, one stream digest and one row
of sorted query times per batch element.  All reductions over coordinates are
explicit loops so that every element's result is bit-identical regardless of
how elements are grouped into batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .problem import PdeProblem
from . import _kernels
from .rng import RandomKey, child_digests, normal_rows

__all__ = [
    "GridMap",
    "floor_K",
    "ForwardSample",
    "ForwardBatch",
    "SimulationError",
    "simulate_forward",
    "forward_batch",
    "bel_value_and_gradient",
    "BelEstimate",
    "MIN_SPAN",
]

MIN_SPAN = 1e-12


class SimulationError(FloatingPointError):
    """Non-finite state produced by a coefficient callable."""


@dataclass(frozen=True)
class GridMap:
    T: float
    K: int

    def __post_init__(self):
        if not self.T > 0 or int(self.K) < 1:
            raise ValueError(f"invalid grid T={self.T}, K={self.K}")

    def point(self, i):
        return np.asarray(i) * self.T / self.K

    def floor(self, t: float) -> float:
        """Largest grid point strictly below ``t``, or 0."""
        if t < 0 or t > self.T:
            raise ValueError(f"t={t} outside [0, {self.T}]")
        if t == 0:
            return 0.0
        i = int(math.floor(t * self.K / self.T))
        i = min(max(i, 0), self.K)
        while i > 0 and i * self.T / self.K >= t:
            i -= 1
        while i + 1 <= self.K and (i + 1) * self.T / self.K < t:
            i += 1
        return i * self.T / self.K


def floor_K(t: float, grid: GridMap) -> float:
    return grid.floor(t)


@dataclass
class ForwardBatch:
    """Query-time states of a batch of forward paths.

    ``X`` has shape (B, Q, d), ``Z`` (B, Q, d+1), ``D`` (B, Q, d, d) when
    requested (``D[b, q, :, k]`` is the k-th derivative column).
    """

    X: np.ndarray
    Z: np.ndarray
    D: np.ndarray | None
    steps: np.ndarray        # active Euler cells per path
    freeze_points: np.ndarray  # coefficient evaluations per path
    degenerate: np.ndarray | None = None  # queries per path with t - s < MIN_SPAN

    @property
    def normal_draws(self):
        return self.steps * self.X.shape[-1]


def _events(grid: GridMap, t, q):
    """Sorted event times, freeze flags and query slots for each batch row."""
    B, Q = q.shape
    K = grid.K
    qmax = q[:, -1]
    gpts = grid.point(np.arange(1, K))[None, :]
    valid = (gpts > t[:, None]) & (gpts < qmax[:, None])
    gtimes = np.where(valid, gpts, qmax[:, None])
    times = np.concatenate([gtimes, q], axis=1)
    freeze = np.concatenate([valid, np.zeros((B, Q), dtype=bool)], axis=1)
    slot = np.concatenate([np.full((B, K - 1), -1), np.broadcast_to(np.arange(Q), (B, Q))], axis=1)
    order = np.argsort(times, axis=1, kind="stable")
    times = np.take_along_axis(times, order, axis=1)
    freeze = np.take_along_axis(freeze, order, axis=1)
    slot = np.take_along_axis(slot, order, axis=1)
    times = np.concatenate([t[:, None], times], axis=1)
    freeze = np.concatenate([np.ones((B, 1), dtype=bool), freeze], axis=1)
    slot = np.concatenate([np.full((B, 1), -1), slot], axis=1)
    return times, freeze, slot


def _matvec(A, v):
    # A (..., i, j), v (..., j) -> (..., i); fixed summation order over j
    out = A[..., 0] * v[..., None, 0]
    for j in range(1, v.shape[-1]):
        out = out + A[..., j] * v[..., None, j]
    return out


def forward_batch(problem: PdeProblem, grid: GridMap, t, x, q, digests,
                  want_D: bool = False, generic: bool = False) -> ForwardBatch:
    """Simulate one path per row; return states at the sorted query times ``q``.

    ``t`` (B,), ``x`` (B, d), ``q`` (B, Q) with ``t < q[:, 0]`` and
    ``q[:, -1] <= T``; ``digests`` (B,) selects each row's stream.  Set
    ``generic`` to bypass the closed form for constant coefficients.
    """
    t = np.asarray(t, dtype=float).reshape(-1)
    B = t.shape[0]
    x = np.asarray(x, dtype=float).reshape(B, problem.d)
    q = np.asarray(q, dtype=float).reshape(B, -1)
    digests = np.asarray(digests, dtype=np.uint64).reshape(B)
    if np.any(q <= t[:, None]) or np.any(np.diff(q, axis=1) < 0) or np.any(q > grid.T):
        raise ValueError("query times must be sorted and lie in (s, T]")
    if q.shape[1] == 1:
        fb = _single_query(problem, grid, t, x, q[:, 0], digests, want_D, generic)
    else:
        fb = _multi_query(problem, grid, t, x, q, digests, want_D, generic)
    # weights over spans below MIN_SPAN are set to 0 and counted
    deg = (q - t[:, None]) < MIN_SPAN
    if deg.any():
        fb.Z[deg, 1:] = 0.0
    fb.degenerate = deg.sum(axis=1)
    return fb


def _multi_query(problem, grid, t, x, q, digests, want_D, generic):
    B, d = x.shape
    Q = q.shape[1]

    times, freeze, slot = _events(grid, t, q)
    dt = np.diff(times, axis=1)
    active = dt > 0
    ordinal = np.cumsum(active, axis=1) - 1
    steps = active.sum(axis=1)
    freeze_points = freeze[:, :-1].sum(axis=1)
    n_cells = dt.shape[1]
    jmax = int(steps.max()) if B else 0
    z = normal_rows(digests, jmax * d).reshape(B, jmax, d) if jmax else np.zeros((B, 0, d))
    rows = np.arange(B)

    Xq = np.empty((B, Q, d))
    Zq = np.empty((B, Q, d + 1))
    Zq[..., 0] = 1.0
    Dq = np.empty((B, Q, d, d)) if want_D else None
    eye = np.eye(d)

    with np.errstate(over="ignore", invalid="ignore"):
        if problem.constant_coefficients and not generic:
            x0 = x
            b0 = problem.mu(x0)
            s0 = problem.sigma(x0)
            si0T = np.swapaxes(problem.sigma_inv(x0), -1, -2)
            # active cell lengths in ordinal order, then W at the end of each
            by_ord = np.argsort(~active, axis=1, kind="stable")[:, :jmax]
            dt_ord = np.take_along_axis(np.where(active, dt, 0.0), by_ord, axis=1)
            W = np.cumsum(np.sqrt(dt_ord)[:, :, None] * z, axis=1)
            n_before = np.cumsum(active, axis=1)
            for qi in range(Q):
                pos = np.argmax(slot[:, 1:] == qi, axis=1)
                k = n_before[rows, pos] - 1
                Wq = W[rows, k]
                h = q[:, qi] - t
                Xq[:, qi] = x0 + b0 * h[:, None] + _matvec(s0, Wq)
                Zq[:, qi, 1:] = _matvec(si0T, Wq) / h[:, None]
                if want_D:
                    Dq[:, qi] = eye
        else:
            X = x.copy()
            DT = np.broadcast_to(eye, (B, d, d)).copy()  # DT[b, k, :] = column k of D
            A = np.zeros((B, d))
            mu_f = np.zeros((B, d))
            sig_f = np.zeros((B, d, d))
            dmu_f = np.zeros((B, d, d))
            dsig_f = np.zeros((B, d, d, d))
            wt_f = np.zeros((B, d, d))
            for j in range(n_cells):
                fz = np.nonzero(freeze[:, j])[0]
                if fz.size:
                    Xf = X[fz]
                    DTf = DT[fz]
                    mu_f[fz] = problem.mu(Xf)
                    sig_f[fz] = problem.sigma(Xf)
                    Xk = np.broadcast_to(Xf[:, None, :], DTf.shape)
                    dmu_f[fz] = problem.d_mu(Xk, DTf)
                    dsig_f[fz] = problem.d_sigma(Xk, DTf)
                    # wt[b, k, i] = (sigma^{-1} D)[i, k]
                    wt_f[fz] = _matvec(problem.sigma_inv(Xf)[:, None, :, :], DTf)
                a = active[:, j]
                dW = np.where(a[:, None], np.sqrt(dt[:, j])[:, None]
                              * z[rows, np.minimum(ordinal[:, j], jmax - 1)], 0.0)
                h = np.where(a, dt[:, j], 0.0)
                X = X + mu_f * h[:, None] + _matvec(sig_f, dW)
                DT = DT + dmu_f * h[:, None, None] + _matvec(dsig_f, dW[:, None, :])
                A = A + _matvec(wt_f, dW)
                sl = slot[:, j + 1]
                hit = np.nonzero(sl >= 0)[0]
                if hit.size:
                    span = times[hit, j + 1] - t[hit]
                    Xq[hit, sl[hit]] = X[hit]
                    Zq[hit, sl[hit], 1:] = A[hit] / span[:, None]
                    if want_D:
                        Dq[hit, sl[hit]] = np.swapaxes(DT[hit], -1, -2)
    return ForwardBatch(Xq, Zq, Dq, steps, freeze_points)


def _single_query(problem, grid, t, x, q, digests, want_D, generic):
    # one query: cells are [t, g_i0], [g_i0, g_i0+1], ..., [g_last, q], each
    # starting at a freeze point, so no event sorting is needed
    B, d = x.shape
    K = grid.K
    below = np.floor(t * K / grid.T).astype(np.int64)
    below += (grid.point(below + 1) <= t)
    below -= (grid.point(below) > t)
    above = np.ceil(q * K / grid.T).astype(np.int64)
    above -= (grid.point(above - 1) >= q)
    above += (grid.point(above) < q)
    # grid points strictly inside (t, q): indices below+1 .. above-1
    steps = np.maximum(above - below - 1, 0) + 1
    jmax = int(steps.max())
    idx = below[:, None] + np.arange(jmax + 1)[None, :]
    pts = np.clip(grid.point(idx), t[:, None], q[:, None])
    pts[:, 0] = t
    pts[np.arange(B), steps] = q
    dts = np.diff(pts, axis=1)
    dts[np.arange(jmax)[None, :] >= steps[:, None]] = 0.0
    sq = np.sqrt(dts)
    span = q - t
    Xq = np.empty((B, 1, d))
    Zq = np.empty((B, 1, d + 1))
    Zq[..., 0] = 1.0
    Dq = np.empty((B, 1, d, d)) if want_D else None
    eye = np.eye(d)
    with np.errstate(over="ignore", invalid="ignore"):
        if problem.constant_coefficients and not generic:
            W = _kernels.brownian_sum(digests, sq, d)
            Xq[:, 0] = x + problem.mu(x) * span[:, None] + _matvec(problem.sigma(x), W)
            Zq[:, 0, 1:] = _matvec(np.swapaxes(problem.sigma_inv(x), -1, -2), W) / span[:, None]
            if want_D:
                Dq[:, 0] = eye
        else:
            z = normal_rows(digests, jmax * d).reshape(B, jmax, d)
            X = x.copy()
            DT = np.broadcast_to(eye, (B, d, d)).copy()
            A = np.zeros((B, d))
            for o in range(jmax):
                live = np.nonzero(o < steps)[0]
                full = live.size == B
                Xf = X if full else X[live]
                DTf = DT if full else DT[live]
                Xk = np.broadcast_to(Xf[:, None, :], DTf.shape)
                dW = sq[live, o, None] * z[live, o]
                h = dts[live, o]
                Xn = Xf + problem.mu(Xf) * h[:, None] + _matvec(problem.sigma(Xf), dW)
                DTn = (DTf + problem.d_mu(Xk, DTf) * h[:, None, None]
                       + _matvec(problem.d_sigma(Xk, DTf), dW[:, None, :]))
                wt = _matvec(problem.sigma_inv(Xf)[:, None, :, :], DTf)
                An = (A if full else A[live]) + _matvec(wt, dW)
                if full:
                    X, DT, A = Xn, DTn, An
                else:
                    X[live], DT[live], A[live] = Xn, DTn, An
            Xq[:, 0] = X
            Zq[:, 0, 1:] = A / span[:, None]
            if want_D:
                Dq[:, 0] = np.swapaxes(DT, -1, -2)
    return ForwardBatch(Xq, Zq, Dq, steps, steps.copy())


@dataclass
class ForwardSample:
    s: float
    x: np.ndarray
    query_times: tuple
    X: dict
    Z: dict
    D: dict
    draws_used: int
    steps: int = 0
    coefficient_evals: int = 0


def simulate_forward(problem: PdeProblem, grid: GridMap, s: float, x, query_times,
                     key: RandomKey, generic: bool = False) -> ForwardSample:
    """Euler states of one path from ``(s, x)`` at each of ``query_times``."""
    qs = tuple(sorted(float(v) for v in np.atleast_1d(query_times)))
    if not qs or qs[0] <= s or qs[-1] > problem.T:
        raise ValueError("query times must lie in (s, T]")
    x = np.asarray(x, dtype=float).reshape(problem.d)
    fb = forward_batch(problem, grid, np.array([s]), x[None], np.array([qs]),
                       np.array([key.digest], dtype=np.uint64), want_D=True, generic=generic)
    if not (np.all(np.isfinite(fb.X)) and np.all(np.isfinite(fb.Z))):
        raise SimulationError(f"non-finite forward state for key path {key.path}")
    return ForwardSample(
        s=s, x=x, query_times=qs,
        X={tq: fb.X[0, i] for i, tq in enumerate(qs)},
        Z={tq: fb.Z[0, i] for i, tq in enumerate(qs)},
        D={tq: fb.D[0, i] for i, tq in enumerate(qs)},
        draws_used=int(fb.normal_draws[0]), steps=int(fb.steps[0]),
        coefficient_evals=int(fb.freeze_points[0]),
    )


@dataclass
class BelEstimate:
    value: np.ndarray
    stderr: np.ndarray
    M: int = 0
    paths: dict = field(default_factory=dict)


def bel_value_and_gradient(problem: PdeProblem, grid: GridMap, t: float, x, M: int,
                           key: RandomKey, chunk: int = 8192) -> BelEstimate:
    """Monte Carlo ``(g(x), 0) + mean_i (g(X_T^i) - g(x)) Z_T^i``.

    Sample ``i`` (1-based) reads the stream ``key ++ (0, -i)``, the same
    streams the terminal block of the multilevel estimator uses.
    """
    if M <= 0:
        raise ValueError(f"sample count must be positive, got {M}")
    d = problem.d
    x = np.asarray(x, dtype=float).reshape(d)
    gx = float(problem.g(x))
    total = np.zeros(d + 1)
    total_sq = np.zeros(d + 1)
    base = np.array([key.digest], dtype=np.uint64)
    for start in range(1, M + 1, chunk):
        idx = np.arange(start, min(start + chunk, M + 1))
        dig = child_digests(base, 0, -idx)[0]
        n = idx.size
        fb = forward_batch(problem, grid, np.full(n, float(t)), np.broadcast_to(x, (n, d)),
                           np.full((n, 1), problem.T), dig)
        y = (problem.g(fb.X[:, 0]) - gx)[:, None] * fb.Z[:, 0]
        total += y.sum(axis=0)
        total_sq += (y * y).sum(axis=0)
    mean = total / M
    var = np.maximum(total_sq / M - mean ** 2, 0.0) * M / max(M - 1, 1)
    value = mean.copy()
    value[0] += gx
    return BelEstimate(value=value, stderr=np.sqrt(var / M), M=M)
