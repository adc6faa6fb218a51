"""PDE problem instances and the built-in benchmarks.

A problem describes the semilinear parabolic equation

    dv/dt + <grad v, mu(x)> + 1/2 tr(sigma sigma^T Hess v) + f(t, x, v, grad v) = 0,
    v(T, x) = g(x)

through plain callables.  All callables are vectorized over leading axes:

==============  ===============================  ==================
callable        arguments                        result
==============  ===============================  ==================
``mu``          x ``(..., d)``                   ``(..., d)``
``sigma``       x ``(..., d)``                   ``(..., d, d)``
``sigma_inv``   x ``(..., d)``                   ``(..., d, d)``
``d_mu``        x ``(..., d)``, h ``(..., d)``   ``(..., d)``
``d_sigma``     x ``(..., d)``, h ``(..., d)``   ``(..., d, d)``
``f``           t ``(...)``, x, w ``(..., d+1)`` ``(...)``
``g``           x ``(..., d)``                   ``(...)``
==============  ===============================  ==================

Callables must be pure: instances are shared between workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "PdeProblem",
    "lambda_weights",
    "project",
    "make_heat_problem",
    "make_manufactured_gradient_problem",
    "make_nonlinear_diffusion_problem",
    "make_zero_problem",
    "make_problem",
    "BUILTIN_PROBLEMS",
    "pde_residual",
]


@dataclass(frozen=True, eq=False)
class PdeProblem:
    d: int
    T: float
    mu: Callable
    sigma: Callable
    sigma_inv: Callable
    d_mu: Callable
    d_sigma: Callable
    f: Callable
    g: Callable
    c: float = 1.0
    L: np.ndarray = field(default=None)
    known_solution: Optional[Callable] = None
    name: str = "custom"
    # mu and sigma constant in x (so D mu = D sigma = 0); enables the closed-form
    # forward path, which equals the frozen Euler scheme exactly in law and value
    constant_coefficients: bool = False
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.d) < 1:
            raise ValueError(f"dimension must be >= 1, got {self.d}")
        if not self.T > 0:
            raise ValueError(f"horizon must be positive, got {self.T}")
        L = np.zeros(self.d + 1) if self.L is None else np.asarray(self.L, dtype=float)
        if L.shape != (self.d + 1,) or np.any(L < 0):
            raise ValueError("L must be a nonnegative vector of length d+1")
        object.__setattr__(self, "L", L)


def lambda_weights(t: float, d: int) -> np.ndarray:
    """Error weights ``(1, sqrt(t), ..., sqrt(t))`` of length ``d + 1``."""
    if t < 0:
        raise ValueError(f"lambda_weights needs t >= 0, got {t}")
    w = np.full(d + 1, math.sqrt(t))
    w[0] = 1.0
    return w


def project(w, nu: int):
    w = np.asarray(w)
    if not 0 <= nu < w.shape[-1]:
        raise IndexError(f"component {nu} out of range for length {w.shape[-1]}")
    return w[..., nu]


# --------------------------------------------------------------------------
# coefficient helpers
# --------------------------------------------------------------------------

def _zero_drift(x):
    return np.zeros_like(np.asarray(x, dtype=float))


def _identity(x):
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    return np.broadcast_to(np.eye(d), x.shape + (d,))


def _zero_dmu(x, h):
    return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(h)))


def _zero_dsigma(x, h):
    shape = np.broadcast_shapes(np.shape(x), np.shape(h))
    return np.zeros(shape + (shape[-1],))


def _zero_f(t, x, w):
    return np.zeros(np.shape(w)[:-1])


def make_heat_problem(d: int, T: float = 1.0, variant: str = "quadratic") -> PdeProblem:
    """Backward heat equation (mu = 0, sigma = I, f = 0) with a closed form."""
    if variant == "quadratic":
        def g(x):
            x = np.asarray(x, dtype=float)
            return np.sum(x * x, axis=-1)

        def solution(t, x):
            x = np.asarray(x, dtype=float)
            t = np.asarray(t, dtype=float)
            out = np.empty(np.broadcast_shapes(t.shape + (1,), x.shape)[:-1] + (d + 1,))
            out[..., 0] = np.sum(x * x, axis=-1) + d * (T - t)
            out[..., 1:] = 2.0 * x
            return out

        # g is not globally Lipschitz; c is nominal metadata
        c = 1.0
    elif variant == "cosine":
        def g(x):
            return np.cos(np.sum(np.asarray(x, dtype=float), axis=-1))

        def solution(t, x):
            x = np.asarray(x, dtype=float)
            t = np.asarray(t, dtype=float)
            s = np.sum(x, axis=-1)
            damp = np.exp(-0.5 * d * (T - t))
            out = np.empty(np.broadcast_shapes(t.shape, s.shape) + (d + 1,))
            out[..., 0] = damp * np.cos(s)
            out[..., 1:] = (-damp * np.sin(s))[..., None]
            return out

        c = max(1.0, math.sqrt(d * T))
    else:
        raise ValueError(f"unknown heat variant {variant!r}")
    return PdeProblem(
        d=d, T=T, mu=_zero_drift, sigma=_identity, sigma_inv=_identity,
        d_mu=_zero_dmu, d_sigma=_zero_dsigma, f=_zero_f, g=g, c=c,
        L=np.zeros(d + 1), known_solution=solution, name=f"heat-{variant}",
        constant_coefficients=True, params={"d": d, "T": T, "variant": variant},
    )


def make_manufactured_gradient_problem(d: int, T: float = 1.0, kappa: float = 0.5) -> PdeProblem:
    """Brownian problem whose nonlinearity reads the gradient.

    Solution ``v = exp(kappa (T - t)) cos(sum x)``; ``f(t, x, y, z) = y + mean(z) + c0(t, x)``
    with ``c0 = (kappa + d/2 - 1) v + exp(kappa (T - t)) sin(sum x)``.
    """
    def f(t, x, w):
        x = np.asarray(x, dtype=float)
        w = np.asarray(w, dtype=float)
        s = np.sum(x, axis=-1)
        e = np.exp(kappa * (T - np.asarray(t, dtype=float)))
        c0 = (kappa + 0.5 * d - 1.0) * e * np.cos(s) + e * np.sin(s)
        return w[..., 0] + np.mean(w[..., 1:], axis=-1) + c0

    def g(x):
        return np.cos(np.sum(np.asarray(x, dtype=float), axis=-1))

    def solution(t, x):
        x = np.asarray(x, dtype=float)
        s = np.sum(x, axis=-1)
        e = np.exp(kappa * (T - np.asarray(t, dtype=float)))
        out = np.empty(np.broadcast_shapes(np.shape(e), s.shape) + (d + 1,))
        out[..., 0] = e * np.cos(s)
        out[..., 1:] = (-e * np.sin(s))[..., None]
        return out

    L = np.concatenate([[1.0], np.full(d, 1.0 / (d * math.sqrt(T)))])
    lip_x = (abs(kappa + 0.5 * d - 1.0) + 1.0) * math.exp(max(kappa, 0.0) * T) * math.sqrt(d)
    c = max(1.0, float(L.sum()), lip_x * T ** 1.5, math.sqrt(d * T))
    return PdeProblem(
        d=d, T=T, mu=_zero_drift, sigma=_identity, sigma_inv=_identity,
        d_mu=_zero_dmu, d_sigma=_zero_dsigma, f=f, g=g, c=c, L=L,
        known_solution=solution, name="manufactured-grad",
        constant_coefficients=True, params={"d": d, "T": T, "kappa": kappa},
    )


def make_nonlinear_diffusion_problem(d: int, T: float = 1.0, amplitude: float = 0.1) -> PdeProblem:
    """Cosine terminal data under ``sigma(x) = diag(1 + a sin x_k)``; no closed form.

    Used for Euler-Maruyama rate studies, where state-dependent diffusion makes
    the discretization error visible.
    """
    a = amplitude

    def sigma(x):
        x = np.asarray(x, dtype=float)
        diag = 1.0 + a * np.sin(x)
        return diag[..., :, None] * np.eye(x.shape[-1])

    def sigma_inv(x):
        x = np.asarray(x, dtype=float)
        diag = 1.0 / (1.0 + a * np.sin(x))
        return diag[..., :, None] * np.eye(x.shape[-1])

    def d_sigma(x, h):
        x, h = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(h, dtype=float))
        diag = a * np.cos(x) * h
        return diag[..., :, None] * np.eye(x.shape[-1])

    def g(x):
        return np.cos(np.sum(np.asarray(x, dtype=float), axis=-1))

    return PdeProblem(
        d=d, T=T, mu=_zero_drift, sigma=sigma, sigma_inv=sigma_inv,
        d_mu=_zero_dmu, d_sigma=d_sigma, f=_zero_f, g=g,
        c=max(1.0 / (1.0 - a) ** 2, math.sqrt(d * T), a), L=np.zeros(d + 1),
        name="heat-cosine-nlsigma", params={"d": d, "T": T, "amplitude": a},
    )


def make_zero_problem(d: int, T: float = 1.0) -> PdeProblem:
    """g = 0, f = 0: every estimator summand vanishes."""
    def g(x):
        return np.zeros(np.shape(x)[:-1])

    def solution(t, x):
        return np.zeros(np.broadcast_shapes(np.shape(t), np.shape(x)[:-1]) + (d + 1,))

    return PdeProblem(
        d=d, T=T, mu=_zero_drift, sigma=_identity, sigma_inv=_identity,
        d_mu=_zero_dmu, d_sigma=_zero_dsigma, f=_zero_f, g=g,
        known_solution=solution, name="zero", constant_coefficients=True,
        params={"d": d, "T": T},
    )


BUILTIN_PROBLEMS = {
    "heat-quadratic": lambda d=1, T=1.0: make_heat_problem(d, T, "quadratic"),
    "heat-cosine": lambda d=1, T=1.0: make_heat_problem(d, T, "cosine"),
    "manufactured-grad": lambda d=1, T=1.0, kappa=0.5: make_manufactured_gradient_problem(d, T, kappa),
    "heat-cosine-nlsigma": lambda d=1, T=1.0, amplitude=0.1: make_nonlinear_diffusion_problem(d, T, amplitude),
    "zero": lambda d=1, T=1.0: make_zero_problem(d, T),
}


def make_problem(problem_id: str, **params) -> PdeProblem:
    try:
        factory = BUILTIN_PROBLEMS[problem_id]
    except KeyError:
        raise ValueError(
            f"unknown problem {problem_id!r}; choose from {sorted(BUILTIN_PROBLEMS)}") from None
    return factory(**params)


def pde_residual(problem: PdeProblem, t: float, x, h: float = 1e-3) -> float:
    """Residual of the PDE for ``problem.known_solution`` at one point.

    Derivatives of the value component are taken by fourth-order central
    differences; the gradient fed into ``f`` also comes from the differences,
    so the check does not trust the solution's own gradient output.
    """
    if problem.known_solution is None:
        raise ValueError("problem has no known solution")
    x = np.asarray(x, dtype=float)
    d = problem.d

    def v(tt, xx):
        return float(problem.known_solution(tt, xx)[..., 0])

    def d1(fun, a):
        return (-fun(a + 2 * h) + 8 * fun(a + h) - 8 * fun(a - h) + fun(a - 2 * h)) / (12 * h)

    dt = d1(lambda s: v(s, x), t)
    E = np.eye(d)
    grad = np.array([d1(lambda s: v(t, x + s * E[k]), 0.0) for k in range(d)])
    hess = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            hess[i, j] = d1(lambda s: d1(lambda r: v(t, x + s * E[i] + r * E[j]), 0.0), 0.0)
    sig = problem.sigma(x)
    w = np.concatenate([[v(t, x)], grad])
    return float(dt + grad @ problem.mu(x) + 0.5 * np.trace(sig @ sig.T @ hess)
                 + problem.f(t, x, w))
