"""Empirical likelihood for moment constraints.

The multiplier is found by maximizing the concave dual

    D(lam) = sum_i c_i * log*(1 + lam' M_i)

where ``log*`` is the pseudo-logarithm, quadratic below the threshold
``eps_i = c_i / sum(c)`` (``1/n`` for an unweighted sample). All log-EL
values use the ratio convention, so ``log_el <= 0`` with equality exactly when
the constraint means vanish.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class Status(str, enum.Enum):
    CONVERGED = "converged"
    INFEASIBLE = "infeasible"
    MAX_ITERATIONS = "max_iterations"


class ConstraintError(ValueError):
    """Constraint matrix cannot be used (shape, non-finite, rank-deficient)."""


@dataclass(frozen=True)
class ELSolution:
    lam: np.ndarray
    log_el: float
    weights: np.ndarray
    status: Status
    iterations: int

    @property
    def converged(self) -> bool:
        return self.status is Status.CONVERGED


def as_constraints(M) -> np.ndarray:
    """Validate and return ``M`` as an ``(n, q)`` float array."""
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2:
        raise ConstraintError(f"constraint matrix must be 2-d, got shape {M.shape}")
    n, q = M.shape
    if q < 1 or n < q:
        raise ConstraintError(f"need n >= q >= 1, got n={n}, q={q}")
    if not np.all(np.isfinite(M)):
        raise ConstraintError("constraint matrix has non-finite entries")
    return M


def _check_rank(M: np.ndarray) -> None:
    if M.shape[1] == 1:
        if not np.any(M):
            raise ConstraintError("constraint column is identically zero; drop it")
        return
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[-1] < 1e-12 * sv[0]:
        raise ConstraintError(
            "constraints are numerically rank-deficient; drop redundant constraints"
        )


def _pseudo_log(z, eps):
    """Pseudo-log and its first two derivatives, elementwise."""
    low = z < eps
    zs = np.where(low, eps, z)
    f = np.log(zs)
    d1 = 1.0 / zs
    d2 = -1.0 / zs**2
    if np.any(low):
        t = z / eps
        f = np.where(low, np.log(eps) - 1.5 + 2.0 * t - 0.5 * t * t, f)
        d1 = np.where(low, (2.0 - t) / eps, d1)
        d2 = np.where(low, -1.0 / eps**2, d2)
    return f, d1, d2


def solve_lambda(M, tol: float = 1e-10, max_iter: int = 100, weights=None, lam0=None) -> ELSolution:
    """Solve the EL multiplier equation ``sum_i c_i M_i / (1 + lam'M_i) = 0``.

    Parameters
    ----------
    M : array_like, shape (n, q)
        Evaluated constraints, one row per observation.
    tol : float
        Convergence threshold on the sup-norm of the (mean) dual gradient,
        relative to ``max(1, max|M|)``.
    weights : array_like, optional
        Nonnegative frequency weights ``c_i``. Rows with zero weight are
        ignored. Defaults to one per row.
    lam0 : array_like, optional
        Warm start for the multiplier.

    Returns
    -------
    ELSolution
        ``log_el = -sum_i c_i log(1 + lam'M_i)``; ``-inf`` if infeasible.
    """
    M = as_constraints(M)
    if tol <= 0:
        raise ValueError("tol must be positive")
    n, q = M.shape
    if weights is None:
        c = np.ones(n)
    else:
        c = np.asarray(weights, dtype=float)
        if c.shape != (n,) or np.any(c < 0) or not np.all(np.isfinite(c)):
            raise ConstraintError("weights must be a finite nonnegative n-vector")
    active = c > 0
    _check_rank(M[active])
    total = c.sum()
    w = c / total
    eps = np.where(active, w, 1.0)
    scale = max(1.0, float(np.max(np.abs(M))))

    if q == 1:
        col = M[active, 0]
        if not (col.min() < 0.0 < col.max()):
            return _infeasible(n, q, 0)

    lam = np.zeros(q) if lam0 is None else np.array(lam0, dtype=float).reshape(q)
    if not np.all(np.isfinite(lam)):
        lam = np.zeros(q)

    def evaluate(lam):
        z = 1.0 + M @ lam
        f, d1, d2 = _pseudo_log(z, eps)
        val = float(w @ f)
        grad = M.T @ (w * d1)
        hess = (M * (w * d2)[:, None]).T @ M
        return val, grad, hess

    val, grad, hess = evaluate(lam)
    if lam0 is not None:
        # a poor warm start is not worth keeping
        v0, g0, h0 = evaluate(np.zeros(q))
        if v0 > val:
            lam, val, grad, hess = np.zeros(q), v0, g0, h0

    status = Status.MAX_ITERATIONS
    it = 0
    while it < max_iter:
        gmax = np.max(np.abs(grad))
        it += 1
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            step = grad / max(1e-300, float(np.max(np.abs(np.diag(hess)))))
        if gmax <= tol * scale:
            # one polishing Newton step; keep it only if the gradient shrinks
            cval, cgrad, chess = evaluate(lam + step)
            if np.max(np.abs(cgrad)) < gmax:
                lam, val, grad, hess = lam + step, cval, cgrad, chess
            status = Status.CONVERGED
            break
        t = 1.0
        accepted = False
        slack = 1e-14 * (1.0 + abs(val))
        while t > 1e-14:
            cand = lam + t * step
            cval, cgrad, chess = evaluate(cand)
            if cval >= val - slack:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        lam, val, grad, hess = cand, cval, cgrad, chess

    z = 1.0 + M @ lam
    if status is Status.CONVERGED and np.any(z[active] < eps[active] * (1.0 - 1e-9)):
        status = Status.INFEASIBLE
    if status is Status.CONVERGED and abs(float(w[active] @ (1.0 / z[active])) - 1.0) > 1e-8:
        # dual unbounded: lam escaped along a separating direction
        status = Status.INFEASIBLE
    if status is Status.MAX_ITERATIONS and np.any(z[active] < eps[active]):
        # pseudo-log optimum outside the true domain: 0 is not inside the hull
        status = Status.INFEASIBLE
    if status is Status.CONVERGED:
        log_el = -float(c[active] @ np.log(z[active]))
        log_el = min(log_el, 0.0)
        weights_out = np.where(active, w / z, 0.0)
    else:
        log_el = -math.inf
        weights_out = np.full(n, np.nan)
    return ELSolution(lam=lam, log_el=log_el, weights=weights_out, status=status, iterations=it)


def _infeasible(n: int, q: int, it: int) -> ELSolution:
    return ELSolution(lam=np.full(q, np.nan), log_el=-math.inf, weights=np.full(n, np.nan),
                      status=Status.INFEASIBLE, iterations=it)


def log_el(M, tol: float = 1e-10) -> float:
    """Log empirical likelihood ratio of the constraint matrix ``M``."""
    return solve_lambda(M, tol=tol).log_el


def neg2_log_el(M, tol: float = 1e-10) -> float:
    """``-2 log EL``; asymptotically chi-squared with ``q`` degrees of freedom."""
    return -2.0 * log_el(M, tol=tol)


def el_weights(M, lam) -> np.ndarray:
    """Implied EL weights ``1 / [n (1 + lam'M_i)]``."""
    M = as_constraints(M)
    lam = np.asarray(lam, dtype=float).reshape(M.shape[1])
    z = 1.0 + M @ lam
    if np.any(z <= 0):
        raise ConstraintError("1 + lam'M_i must be positive for every observation")
    return 1.0 / (M.shape[0] * z)
