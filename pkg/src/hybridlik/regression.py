"""Hybrid likelihood for linear regression with a protected covariate subset.

The parametric part is the least-squares criterion ``-sum(residual^2)``. The
empirical-likelihood part controls the coefficients of the smaller regression
of ``y`` on the covariates in ``S``, whose model value follows from the full
coefficients and the covariate mean and covariance (plugged in).

Observations are rows ``(y, x_1, ..., x_d)``; ``S`` holds 0-based covariate
indices.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimator import HLFit, HLProblem, Plugin, fit_mhl
from .models import ControlMap, EstimatingFunction, ParametricModel


class LeastSquaresModel(ParametricModel):
    name = "least-squares"

    def __init__(self, d: int):
        self.d = d
        self.param_names = ("intercept",) + tuple(f"beta{j + 1}" for j in range(d))

    def _resid(self, zs, theta):
        zs = np.asarray(zs, dtype=float)
        return zs[:, 0] - theta[0] - zs[:, 1:] @ theta[1:]

    def logpdf(self, zs, theta):
        return -self._resid(zs, theta) ** 2

    def score(self, zs, theta):
        zs = np.asarray(zs, dtype=float)
        r = self._resid(zs, theta)
        return 2.0 * r[:, None] * np.column_stack([np.ones(len(zs)), zs[:, 1:]])

    def mle(self, zs):
        return ols(np.asarray(zs)[:, 1:], np.asarray(zs)[:, 0])

    initial = mle


def ols(X, y) -> np.ndarray:
    """``(intercept, coefficients)`` by least squares."""
    X = np.asarray(X, dtype=float)
    Z = np.column_stack([np.ones(len(X)), X])
    return np.linalg.lstsq(Z, np.asarray(y, dtype=float), rcond=None)[0]


def _check_subset(S, d):
    S = np.asarray(sorted(set(int(s) for s in S)), dtype=int)
    if len(S) == 0:
        raise ValueError("subset S must be nonempty")
    if S.min() < 0 or S.max() >= d:
        raise ValueError(f"subset indices must lie in 0..{d - 1}")
    return S


def regression_ef(S) -> EstimatingFunction:
    """``m(z, mu) = (y - mu_0 - mu_S'x_S) (1, x_S)`` for ``mu = (beta_0, beta_S)``."""
    S = np.asarray(S, dtype=int)
    q = len(S) + 1

    def design(zs):
        zs = np.asarray(zs, dtype=float)
        return np.column_stack([np.ones(len(zs)), zs[:, 1 + S]])

    def m(zs, mu, P=None):
        Xs = design(zs)
        r = np.asarray(zs, dtype=float)[:, 0] - Xs @ mu
        return r[:, None] * Xs

    def dm(zs, mu, P=None):
        Xs = design(zs)
        return -np.einsum("iq,is->iqs", Xs, Xs)

    return EstimatingFunction(q=q, s=q, m=m, dm_dmu=dm, name="regression-subset")


def _vech(A):
    return A[np.tril_indices(A.shape[0])]


def _unvech(v, d):
    A = np.zeros((d, d))
    A[np.tril_indices(d)] = v
    return A + np.tril(A, -1).T


def subset_coef_matrix(mu_x, cov_x, S) -> np.ndarray:
    """Linear map from full coefficients ``(beta_0, beta)`` to ``(beta_0, beta_S)``.

    Population coefficients of the best linear predictor of ``y`` on ``x_S``
    when ``y = beta_0 + beta'x`` plus noise uncorrelated with ``x``.
    """
    mu_x = np.asarray(mu_x, dtype=float)
    cov_x = np.asarray(cov_x, dtype=float)
    S = np.asarray(S, dtype=int)
    d = len(mu_x)
    mu1 = np.concatenate([[1.0], mu_x])
    cov1 = np.zeros((d + 1, d + 1))
    cov1[1:, 1:] = cov_x
    rows = np.concatenate([[0], 1 + S])
    second = cov1 + np.outer(mu1, mu1)  # E[x_{+1} x_{+1}']
    left = second[np.ix_(rows, rows)]
    right = second[rows, :]
    try:
        return np.linalg.solve(left, right)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("subset second-moment matrix is singular") from exc


def subset_coef_map(beta_full, mu_x, cov_x, S) -> np.ndarray:
    return subset_coef_matrix(mu_x, cov_x, S) @ np.asarray(beta_full, dtype=float)


def subset_control(S, d: int) -> ControlMap:
    S = np.asarray(S, dtype=int)

    def split(P):
        return P[:d], _unvech(P[d:], d)

    def mu(theta, P):
        mx, cx = split(P)
        return subset_coef_matrix(mx, cx, S) @ theta

    def jac(theta, P):
        mx, cx = split(P)
        return subset_coef_matrix(mx, cx, S)

    return ControlMap(s=len(S) + 1, mu=mu, jacobian=jac, name="regression-subset")


def moment_plugin(X) -> Plugin:
    """Covariate mean and (1/n) covariance with their estimating function."""
    X = np.asarray(X, dtype=float)
    d = X.shape[1]
    mean = X.mean(axis=0)
    cov = (X - mean).T @ (X - mean) / len(X)
    rows, cols = np.tril_indices(d)

    def h(zs, P):
        x = np.asarray(zs, dtype=float)[:, 1:]
        c = x - P[:d]
        outer = c[:, rows] * c[:, cols]
        return np.hstack([c, outer - P[d:]])

    return Plugin(h=h, P_hat=np.concatenate([mean, _vech(cov)]))


@dataclass(frozen=True)
class RegressionProblem:
    X: np.ndarray
    Y: np.ndarray
    S: tuple
    a: float

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        Y = np.asarray(self.Y, dtype=float)
        n, d = X.shape
        if Y.shape != (n,):
            raise ValueError("Y must have one entry per row of X")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("design and response must be finite")
        if n <= d + 1:
            raise ValueError("need more observations than covariates plus one")
        if not 0.0 <= self.a < 1.0:
            raise ValueError("a must lie in [0, 1)")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "S", tuple(_check_subset(self.S, d)))

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def hl_problem(self) -> HLProblem:
        S = np.asarray(self.S, dtype=int)
        zs = np.column_stack([self.Y, self.X])
        return HLProblem(model=LeastSquaresModel(self.d), ef=regression_ef(S),
                         control=subset_control(S, self.d), a=self.a, sample=zs,
                         plugin=moment_plugin(self.X))


def fit_hybrid_regression(problem: RegressionProblem, init=None) -> HLFit:
    """Hybrid regression fit over ``(beta_0, beta)``, starting from OLS by default."""
    pb = problem.hl_problem()
    if init is None:
        init = ols(problem.X, problem.Y)
    return fit_mhl(pb, init=init)
