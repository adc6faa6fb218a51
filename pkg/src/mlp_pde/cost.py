"""Cost accounting: instrumented counters and the recursive cost model.

Unit convention.  One e-unit is one Euler cell of one forward path: ``d``
scalar normal draws, one evaluation of ``(mu, D mu)`` and one of
``(sigma, D sigma, sigma^{-1})``, plus one spare slot, so ``d + 3`` raw
operations.  The spare slot pays for the proxy-time uniform of a level sample
(a path has at most K cells).  A level sample with ``l >= 1`` evaluates ``f``
twice, so one f-unit is two evaluations.  Each call also evaluates ``g(x)``
once; the spare slots of its terminal samples cover it when ``e_d >= (d+3) g_d``,
which holds for :meth:`CostModelParams.for_problem` (``e_d = d+3, f_d = 2,
g_d = 1``, i.e. every raw operation costs 1).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from functools import lru_cache

__all__ = [
    "CostLedger",
    "CostModelParams",
    "sample_count",
    "theoretical_cost",
    "cost_upper_bound",
    "reconcile",
    "CostReport",
    "CostViolation",
]

_FUZZ = 1e-9


def sample_count(m: float, k: int, rounding: str = "ceil") -> int:
    """``rounding(m**k)``, at least 1.

    A relative fuzz of 1e-9 keeps values such as ``(6**(1/3))**6`` at 36.
    """
    v = float(m) ** k
    if rounding == "ceil":
        n = math.ceil(v - _FUZZ * max(1.0, v))
    elif rounding == "round":
        n = int(round(v))
    else:
        raise ValueError(f"unknown rounding policy {rounding!r}")
    return max(n, 1)


@dataclass
class CostLedger:
    """Instrumented work counters of one or more estimator runs."""

    g_evals: int = 0
    f_evals: int = 0
    mu_evals: int = 0            # evaluations of (mu, D mu)
    sigma_evals: int = 0         # evaluations of (sigma, D sigma, sigma^{-1})
    mu_applications: int = 0     # mu(x) plus one D mu(x)(h) per derivative column
    sigma_applications: int = 0  # sigma, sigma^{-1}, and one D sigma(x)(h) per column
    normal_draws: int = 0
    uniform_draws: int = 0
    euler_steps: int = 0
    forward_paths: int = 0
    recursive_calls: int = 0
    degenerate_weights: int = 0  # diagnostic: weights zeroed for spans below 1e-12

    @property
    def scalar_draws(self) -> int:
        return self.normal_draws + self.uniform_draws

    @property
    def coeff_evals(self) -> int:
        return self.mu_evals + self.sigma_evals

    def __add__(self, other: "CostLedger") -> "CostLedger":
        return CostLedger(**{f.name: getattr(self, f.name) + getattr(other, f.name)
                             for f in fields(self)})

    def merge(self, other: "CostLedger") -> "CostLedger":
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def as_dict(self) -> dict:
        out = asdict(self)
        out["scalar_draws"] = self.scalar_draws
        out["coeff_evals"] = self.coeff_evals
        return out

    def weighted_total(self, units: "CostModelParams", d: int) -> float:
        """Counters mapped onto model units (see module docstring)."""
        e_work = self.scalar_draws + self.coeff_evals
        per_unit = d + 3
        return (units.e_d * e_work / per_unit + units.f_d * self.f_evals / 2
                + units.g_d * self.g_evals)


@dataclass(frozen=True)
class CostModelParams:
    e_d: float = 1.0
    f_d: float = 1.0
    g_d: float = 1.0

    def __post_init__(self):
        if min(self.e_d, self.f_d, self.g_d) < 0:
            raise ValueError("unit costs must be nonnegative")

    @classmethod
    def for_problem(cls, d: int) -> "CostModelParams":
        return cls(e_d=float(d + 3), f_d=2.0, g_d=1.0)

    @property
    def total(self) -> float:
        return self.e_d + self.f_d + self.g_d


def theoretical_cost(n: int, m: float, K: int, units: CostModelParams,
                     rounding: str = "ceil") -> float:
    """The cost recurrence evaluated as an equality, ``C_{-1} = C_0 = 0``.

    ``C_n = M_n (K e + g) + sum_{l<n} M_{n-l} (K e + f + C_l + C_{l-1})``
    with ``M_k = rounding(m**k)``.
    """
    if n < -1:
        raise ValueError(f"level must be >= -1, got {n}")
    e, f, g = units.e_d, units.f_d, units.g_d

    @lru_cache(maxsize=None)
    def C(k: int) -> float:
        if k <= 0:
            return 0.0
        total = sample_count(m, k, rounding) * (K * e + g)
        for ell in range(k):
            total += sample_count(m, k - ell, rounding) * (K * e + f + C(ell) + C(ell - 1))
        return total

    return C(n)


def cost_upper_bound(n: int, m: float, K: int, units: CostModelParams) -> float:
    """``K (e + f + g) (3 m)^n``."""
    if n < 1:
        raise ValueError(f"bound stated for n >= 1, got {n}")
    return K * units.total * (3.0 * m) ** n


class CostViolation(AssertionError):
    pass


@dataclass
class CostReport:
    ledger: dict
    instrumented: float
    theoretical: float
    upper_bound: float
    within_model: bool
    within_bound: bool

    def __str__(self):
        return (f"instrumented={self.instrumented:.6g} model={self.theoretical:.6g} "
                f"bound={self.upper_bound:.6g} ledger={self.ledger}")


def reconcile(ledger: CostLedger, params, units: CostModelParams | None = None,
              d: int = 1, strict: bool = True) -> CostReport:
    """Compare one estimator run's counters with the model and the bound.

    ``params`` is an :class:`~mlp_pde.mlp.MlpParams`.  With ``strict`` a
    violation raises :class:`CostViolation` carrying the breakdown.
    """
    units = units or CostModelParams.for_problem(d)
    inst = ledger.weighted_total(units, d)
    if params.n <= 0:
        theo, bound = 0.0, 0.0
    else:
        theo = theoretical_cost(params.n, params.m, params.K, units, params.rounding)
        bound = cost_upper_bound(params.n, params.m, params.K, units)
    rep = CostReport(ledger.as_dict(), inst, theo, bound,
                     within_model=inst <= theo + 1e-9, within_bound=inst <= bound + 1e-9)
    if strict and not (rep.within_model and rep.within_bound):
        raise CostViolation(str(rep))
    return rep
