"""scikit-learn style front end for the multilevel Picard estimator."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .mlp import MlpParams, mlp_batch, schedule
from .problem import make_problem
from .rng import RandomKey


class MultilevelPicardSolver(BaseEstimator):
    """Evaluate ``(v, grad v)`` of a built-in problem at query points.

    Nothing is learned from data: ``fit`` builds the problem and the
    estimator parameters, ``predict`` averages ``replications`` independent
    realizations at each row of ``X = [t, x_1, ..., x_d]``.

    Parameters
    ----------
    problem : str
        Built-in problem id.
    problem_params : dict, optional
        Keyword arguments of the problem factory (``d``, ``T``, ...).
    n : int
        Picard level.
    m, K : optional
        Override the schedule's branching base and grid count.
    replications : int
        Realizations averaged per query point.
    seed : int
    """

    def __init__(self, problem="heat-cosine", problem_params=None, n=3, m=None, K=None,
                 replications=10, rounding="ceil", seed=0):
        self.problem = problem
        self.problem_params = problem_params
        self.n = n
        self.m = m
        self.K = K
        self.replications = replications
        self.rounding = rounding
        self.seed = seed

    def fit(self, X=None, y=None):
        if not isinstance(self.n, (int, np.integer)) or self.n < 0:
            raise ValueError(f"n must be a nonnegative integer, got {self.n!r}")
        if not isinstance(self.replications, (int, np.integer)) or self.replications < 1:
            raise ValueError(f"replications must be a positive integer, got {self.replications!r}")
        self.problem_ = make_problem(self.problem, **(self.problem_params or {}))
        base = schedule(max(int(self.n), 1))
        self.params_ = MlpParams(n=int(self.n), m=base.m if self.m is None else float(self.m),
                                 K=base.K if self.K is None else int(self.K), rounding=self.rounding)
        self.n_features_in_ = self.problem_.d + 1
        if X is not None:
            self._check_X(X)
        return self

    def _check_X(self, X):
        X = check_array(X, dtype=np.float64, ensure_2d=True)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns; expected t plus d={self.problem_.d} coordinates")
        T = self.problem_.T
        if np.any(X[:, 0] < 0) or np.any(X[:, 0] >= T):
            raise ValueError(f"times must lie in [0, {T})")
        return X

    def _realizations(self, X):
        check_is_fitted(self, "params_")
        X = self._check_X(X)
        pts = [(row[0], row[1:]) for row in X]
        out = mlp_batch(self.problem_, self.params_, pts, int(self.replications), RandomKey(int(self.seed)))
        return np.array([[e.value for e in per] for per in out])   # (N, R, d+1)

    def predict(self, X):
        """Mean over replications, shape ``(N, d+1)``: value then gradient."""
        return self._realizations(X).mean(axis=1)

    def predict_with_stderr(self, X):
        V = self._realizations(X)
        R = V.shape[1]
        se = V.std(axis=1, ddof=1) / np.sqrt(R) if R > 1 else np.full(V.shape[::2], np.nan)
        return V.mean(axis=1), se
