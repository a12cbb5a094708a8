"""Sandwich covariance, stacked plug-in inference and delta-method tools."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .estimator import HLFit, HLProblem, hl_gradient
from .optimize import fd_jacobian


class SingularMatrixError(np.linalg.LinAlgError):
    pass


@dataclass
class SandwichEstimates:
    J_hat: np.ndarray
    K_hat: np.ndarray
    cov_theta: np.ndarray
    lambda_prime: np.ndarray
    S1: np.ndarray
    S2: np.ndarray
    psi_grad: np.ndarray  # (n, p) estimated influence contributions
    n: int

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov_theta))


@dataclass
class StackedEstimates:
    A_hat: np.ndarray
    B_hat: np.ndarray
    C_hat: np.ndarray
    psi: np.ndarray  # (n, p+q+r) stacked estimating functions at the fit
    p: int
    q: int
    r: int
    n: int
    condition: float

    @property
    def cov_theta(self) -> np.ndarray:
        return self.C_hat[: self.p, : self.p] / self.n


def _pieces(problem: HLProblem, theta, lam, P=None):
    """Per-observation ``M``, ``D = dm/dtheta`` and ``z = 1 + lam'M``."""
    P = problem.P if P is None else P
    mu = problem.control(theta, P)
    M = problem.ef(problem.sample, mu, P)
    D = problem.ef.jac(problem.sample, mu, P) @ problem.control.jac(theta, P)
    z = 1.0 + M @ lam
    return M, D, z


def _score(problem, theta):
    if problem.a == 1.0 or problem.model is None:
        return np.zeros((problem.n, len(theta)))
    return problem.model.score(problem.sample, theta)


def _inv(A, what):
    try:
        return np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(f"{what} is singular") from exc


def multiplier_derivative(problem: HLProblem, theta, lam):
    """``S1``, ``S2`` and ``lambda'(theta) = -S1^{-1} S2`` at the fit."""
    M, D, z = _pieces(problem, theta, lam)
    S1 = -np.einsum("iq,ir,i->qr", M, M, 1.0 / z**2) / problem.n
    lamD = np.einsum("q,iqp->ip", lam, D)
    S2 = (np.einsum("iqp,i->qp", D, 1.0 / z) - np.einsum("iq,ip,i->qp", M, lamD, 1.0 / z**2)) / problem.n
    if np.linalg.cond(S1) > 1e12:
        raise SingularMatrixError("S1 is singular; constraints are rank-deficient at the fit")
    return S1, S2, -np.linalg.solve(S1, S2)


def psi_hat_gradient(fit: HLFit, problem: HLProblem | None = None) -> np.ndarray:
    """Estimated influence contributions, one row per observation."""
    problem = problem or fit.problem
    theta, lam, a = fit.theta_hat, fit.lambda_hat, problem.a
    grad = (1.0 - a) * _score(problem, theta)
    if a > 0.0:
        M, D, z = _pieces(problem, theta, lam)
        _, _, lp = multiplier_derivative(problem, theta, lam)
        grad = grad - a * (M @ lp + np.einsum("iqp,q->ip", D, lam)) / z[:, None]
    return grad


def hessian_information(problem: HLProblem, theta) -> np.ndarray:
    """``J_hat = -H h_n(theta) / n`` by central differences of the gradient."""
    H = fd_jacobian(lambda th: hl_gradient(problem, th), theta)
    H = 0.5 * (H + H.T)
    return -H / problem.n


def sandwich(fit: HLFit, problem: HLProblem | None = None) -> SandwichEstimates:
    """Model-robust sandwich ``J^{-1} K J^{-1} / n`` for a non-plug-in fit."""
    problem = problem or fit.problem
    theta, lam = fit.theta_hat, fit.lambda_hat
    n = problem.n
    q = problem.ef.q
    if problem.a > 0.0:
        S1, S2, lp = multiplier_derivative(problem, theta, lam)
    else:
        S1 = np.full((q, q), np.nan)
        S2 = np.full((q, len(theta)), np.nan)
        lp = np.full((q, len(theta)), np.nan)
    psi = psi_hat_gradient(fit, problem)
    K = psi.T @ psi / n
    J = hessian_information(problem, theta)
    if np.linalg.eigvalsh(J).min() <= 0:
        warnings.warn("J_hat is not positive definite: the fit may sit at a boundary or saddle",
                      RuntimeWarning)
    Jinv = _inv(J, "J_hat")
    cov = Jinv @ K @ Jinv.T / n
    cov = 0.5 * (cov + cov.T)
    return SandwichEstimates(J_hat=J, K_hat=K, cov_theta=cov, lambda_prime=lp, S1=S1, S2=S2,
                             psi_grad=psi, n=n)


def correct_spec_matrices(model, ef, control, theta0, a: float, n_draws: int = 200_000,
                          seed: int = 20240101):
    """``(J_a*, K_a*)`` when the model is true, by Monte-Carlo integration.

    Returns a dict with the two matrices and the ingredients ``J`` (Fisher
    information), ``W = Var m``, ``C = Cov(u, m)`` and ``xi0 = E dm/dtheta``.
    """
    theta0 = np.asarray(theta0, dtype=float)
    rng = np.random.Generator(np.random.Philox(key=seed))
    ys = model.sample(rng, theta0, n_draws)
    u = model.score(ys, theta0)
    mu = control(theta0)
    M = ef(ys, mu)
    D = ef.jac(ys, mu) @ control.jac(theta0)
    J = np.cov(u, rowvar=False).reshape(len(theta0), len(theta0))
    W = np.atleast_2d(np.cov(M, rowvar=False))
    uc = u - u.mean(axis=0)
    Mc = M - M.mean(axis=0)
    C = uc.T @ Mc / (n_draws - 1)
    xi0 = D.mean(axis=0)
    Winv = _inv(W, "W")
    G = xi0.T @ Winv @ xi0
    J_star = (1.0 - a) * J + a * G
    cross = C @ Winv @ xi0
    K_star = (1.0 - a) ** 2 * J + a**2 * G - a * (1.0 - a) * (cross + cross.T)
    return {"J_star": J_star, "K_star": K_star, "J": J, "W": W, "C": C, "xi0": xi0}


def psi_fic(problem: HLProblem, alpha, p: int) -> np.ndarray:
    """Stacked estimating functions at ``alpha = (theta, lam, P)``.

    Columns: ``m/(1+lam'm)`` (q), the theta first-order condition (p) and the
    plug-in estimating function ``h`` (r).
    """
    q = problem.ef.q
    theta = alpha[:p]
    lam = alpha[p:p + q]
    P = alpha[p + q:] if problem.plugin is not None else None
    a = problem.a
    M, D, z = _pieces(problem, theta, lam, P)
    ml = M / z[:, None]
    dtheta = (1.0 - a) * _score(problem, theta) - a * np.einsum("iqp,q->ip", D, lam) / z[:, None]
    cols = [ml, dtheta]
    if problem.plugin is not None:
        cols.append(np.asarray(problem.plugin.h(problem.sample, P), dtype=float).reshape(problem.n, -1))
    return np.hstack(cols)


def stacked_sandwich(fit: HLFit, problem: HLProblem | None = None) -> StackedEstimates:
    """Joint sandwich for ``(theta, lam, P)``; ``A`` by finite differences."""
    problem = problem or fit.problem
    p, q = len(fit.theta_hat), problem.ef.q
    parts = [fit.theta_hat, fit.lambda_hat]
    r = 0
    if problem.plugin is not None:
        r = problem.plugin.r
        parts.append(np.asarray(problem.plugin.P_hat, dtype=float))
    alpha = np.concatenate(parts)
    psi = psi_fic(problem, alpha, p)
    A = fd_jacobian(lambda al: psi_fic(problem, al, p).mean(axis=0), alpha)
    B = psi.T @ psi / problem.n
    Ainv = _inv(A, "A_hat")
    C = Ainv @ B @ Ainv.T
    C = 0.5 * (C + C.T)
    return StackedEstimates(A_hat=A, B_hat=B, C_hat=C, psi=psi, p=p, q=q, r=r, n=problem.n,
                            condition=float(np.linalg.cond(A)))


def delta_ci(theta_hat, cov, g, grad_g=None, level: float = 0.95):
    """Wald interval for ``g(theta)``; returns ``(estimate, lower, upper, se)``."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    est = float(g(theta_hat))
    grad = (fd_jacobian(lambda th: np.atleast_1d(g(th)), theta_hat)[0]
            if grad_g is None else np.asarray(grad_g(theta_hat), dtype=float))
    if not np.any(grad):
        warnings.warn("focus gradient is zero; the interval is degenerate", RuntimeWarning)
    se = math.sqrt(max(float(grad @ np.asarray(cov) @ grad), 0.0))
    z = stats.norm.ppf(0.5 + level / 2.0)
    return est, est - z * se, est + z * se, se


def two_sample_test(est_left: float, se_left: float, est_right: float, se_right: float,
                    alternative: str = "two-sided") -> float:
    """z-test of equal focus values in two independent samples; returns a p-value."""
    diff = est_left - est_right
    se = math.hypot(se_left, se_right)
    if se == 0.0:
        return 1.0 if diff == 0.0 else 0.0
    zval = diff / se
    if alternative == "two-sided":
        return float(2.0 * stats.norm.sf(abs(zval)))
    if alternative == "greater":
        return float(stats.norm.sf(zval))
    if alternative == "less":
        return float(stats.norm.cdf(zval))
    raise ValueError(f"unknown alternative {alternative!r}")
