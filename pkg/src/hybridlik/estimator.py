"""Maximum hybrid likelihood estimation.

The hybrid log-likelihood is ``(1 - a) * loglik(theta) + a * log EL[mu(theta)]``.
Its gradient uses the envelope identity, so the derivative of the inner
multiplier never enters.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .el import ConstraintError, Status, solve_lambda
from .models import ControlMap, EstimatingFunction, ParametricModel
from .optimize import maximize

DEFAULT_GTOL = 1e-8


@dataclass(frozen=True)
class Plugin:
    """Plug-in estimate ``P_hat`` with its estimating function ``h(y, P)`` (n, r)."""

    h: Callable
    P_hat: np.ndarray

    @property
    def r(self) -> int:
        return len(self.P_hat)


@dataclass(frozen=True)
class HLProblem:
    model: Optional[ParametricModel]
    ef: EstimatingFunction
    control: ControlMap
    a: float
    sample: np.ndarray
    plugin: Optional[Plugin] = None

    def __post_init__(self):
        object.__setattr__(self, "sample", np.asarray(self.sample, dtype=float))
        a = float(self.a)
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"balance parameter must lie in [0, 1], got {a}")
        if a == 1.0 and self.control.name != "identity":
            raise ValueError("a = 1 requires the identity control map mu(theta) = theta")
        if self.model is None and a != 1.0:
            raise ValueError("a parametric model is required when a < 1")
        if self.ef.s != self.control.s:
            raise ValueError("estimating function and control map disagree on the control dimension")
        if self.ef.r and self.plugin is None:
            raise ValueError("estimating function expects a plug-in value")

    @property
    def n(self) -> int:
        return len(self.sample)

    @property
    def P(self):
        return None if self.plugin is None else np.asarray(self.plugin.P_hat, dtype=float)

    def with_a(self, a: float) -> "HLProblem":
        return dataclasses.replace(self, a=a)


@dataclass
class HLFit:
    theta_hat: np.ndarray
    lambda_hat: np.ndarray
    a: float
    log_hl: float
    status: Status
    n: int
    iterations: int = 0
    grad_norm: float = math.nan
    plugin: Optional[np.ndarray] = None
    problem: Optional[HLProblem] = field(default=None, repr=False)

    @property
    def converged(self) -> bool:
        return self.status is Status.CONVERGED


class InfeasibleError(ArithmeticError):
    """The inner EL problem has no solution at this parameter value."""


def constraints(problem: HLProblem, theta, P=None) -> np.ndarray:
    P = problem.P if P is None else P
    mu = problem.control(theta, P)
    return problem.ef(problem.sample, mu, P)


def _loglik(problem, theta):
    if problem.a == 1.0:
        return 0.0
    return problem.model.loglik(problem.sample, theta)


def _inner(problem, theta, lam0=None):
    try:
        M = constraints(problem, theta)
    except (ValueError, ArithmeticError):
        return None
    if not np.all(np.isfinite(M)):
        return None
    try:
        return solve_lambda(M, lam0=lam0)
    except ConstraintError:
        return None


def hybrid_loglik(problem: HLProblem, theta) -> float:
    """Hybrid log-likelihood; ``-inf`` outside the model domain or EL support."""
    theta = np.asarray(theta, dtype=float)
    if problem.model is not None and not problem.model.in_domain(theta):
        return -math.inf
    ll = _loglik(problem, theta)
    if not math.isfinite(ll):
        return -math.inf
    if problem.a == 0.0:
        return ll
    sol = _inner(problem, theta)
    if sol is None or not sol.converged:
        return -math.inf
    return (1.0 - problem.a) * ll + problem.a * sol.log_el


def _gradient_from(problem, theta, lam):
    a = problem.a
    P = problem.P
    g = np.zeros(len(theta))
    if a < 1.0:
        g += (1.0 - a) * problem.model.score(problem.sample, theta).sum(axis=0)
    if a > 0.0:
        mu = problem.control(theta, P)
        M = problem.ef(problem.sample, mu, P)
        D = problem.ef.jac(problem.sample, mu, P) @ problem.control.jac(theta, P)  # (n, q, p)
        z = 1.0 + M @ lam
        g -= a * np.einsum("iqp,q,i->p", D, lam, 1.0 / z)
    return g


def hl_gradient(problem: HLProblem, theta) -> np.ndarray:
    """Analytic gradient of :func:`hybrid_loglik`."""
    theta = np.asarray(theta, dtype=float)
    lam = np.zeros(problem.ef.q)
    if problem.a > 0.0:
        sol = _inner(problem, theta)
        if sol is None or not sol.converged:
            raise InfeasibleError("inner EL problem infeasible at theta; penalize this point")
        lam = sol.lam
    return _gradient_from(problem, theta, lam)


class _Objective:
    """Objective/gradient pair sharing inner solves and warm starts."""

    def __init__(self, problem: HLProblem):
        self.problem = problem
        self.lam = None
        self._key = None
        self._sol = None

    def _solve(self, theta):
        key = theta.tobytes()
        if key != self._key:
            self._key = key
            self._sol = _inner(self.problem, theta, lam0=self.lam)
            if self._sol is not None and self._sol.converged:
                self.lam = self._sol.lam
        return self._sol

    def value(self, theta):
        theta = np.asarray(theta, dtype=float)
        pb = self.problem
        if pb.model is not None and not pb.model.in_domain(theta):
            return -math.inf
        ll = _loglik(pb, theta)
        if not math.isfinite(ll):
            return -math.inf
        if pb.a == 0.0:
            return ll
        sol = self._solve(theta)
        if sol is None or not sol.converged:
            return -math.inf
        return (1.0 - pb.a) * ll + pb.a * sol.log_el

    def grad(self, theta):
        theta = np.asarray(theta, dtype=float)
        lam = np.zeros(self.problem.ef.q)
        if self.problem.a > 0.0:
            sol = self._solve(theta)
            if sol is None or not sol.converged:
                raise InfeasibleError("inner EL problem infeasible")
            lam = sol.lam
        return _gradient_from(self.problem, theta, lam)


def fit_mhl(problem: HLProblem, init=None, gtol: float = DEFAULT_GTOL, max_iter: int = 200) -> HLFit:
    """Maximum hybrid likelihood fit.

    ``init`` defaults to the parametric MLE. Convergence means the gradient
    sup-norm is at most ``gtol * n``.
    """
    if init is None:
        if problem.model is None:
            raise ValueError("init is required when no parametric model is given")
        init = problem.model.mle(problem.sample)
    init = np.asarray(init, dtype=float)
    obj = _Objective(problem)
    res = maximize(obj.value, obj.grad, init, gtol=gtol * problem.n, max_iter=max_iter)
    lam = np.zeros(problem.ef.q)
    status = res.status
    if problem.a > 0.0 and math.isfinite(res.fun):
        sol = _inner(problem, res.x)
        if sol is not None and sol.converged:
            lam = sol.lam
        else:
            status = Status.INFEASIBLE
    elif not math.isfinite(res.fun):
        status = Status.INFEASIBLE
    if problem.a == 0.0 and problem.ef is not None:
        # report the multiplier at the parametric fit for later inference
        sol = _inner(problem, res.x)
        lam = sol.lam if sol is not None and sol.converged else np.full(problem.ef.q, np.nan)
    gnorm = float(np.max(np.abs(res.grad))) if np.all(np.isfinite(res.grad)) else math.nan
    return HLFit(theta_hat=res.x, lambda_hat=lam, a=problem.a, log_hl=res.fun, status=status,
                 n=problem.n, iterations=res.nit, grad_norm=gnorm, plugin=problem.P, problem=problem)


def fit_mhl_plugin(problem: HLProblem, init=None, gtol: float = DEFAULT_GTOL) -> HLFit:
    """Fit with the plug-in value frozen at ``problem.plugin.P_hat``."""
    if problem.plugin is None:
        raise ValueError("problem has no plug-in estimate")
    return fit_mhl(problem, init=init, gtol=gtol)


def fit_path(problem: HLProblem, grid, init=None, gtol: float = DEFAULT_GTOL) -> list[HLFit]:
    """Fit along a grid of balance parameters, warm-starting each fit at the last."""
    fits = []
    x = init
    for a in grid:
        fit = fit_mhl(problem.with_a(float(a)), init=x, gtol=gtol)
        fits.append(fit)
        if fit.converged:
            x = fit.theta_hat
    return fits
