"""Smooth maximization with an infeasibility-tolerant fallback.

Objectives may return ``-inf`` outside their feasible set; the line search
treats that as a failed trial step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .el import Status


@dataclass
class OptResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    status: Status
    nit: int
    fallback_used: bool = False


def fd_jacobian(fun, x, rel_step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of a vector function (rows = outputs)."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(len(x)):
        h = rel_step * (1.0 + abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        cols.append((np.asarray(fun(x + e), dtype=float) - np.asarray(fun(x - e), dtype=float)) / (2 * h))
    return np.stack(cols, axis=-1)


def _safe(f, x):
    try:
        v = float(f(x))
    except (ValueError, ArithmeticError, np.linalg.LinAlgError):
        return -math.inf
    return v if not math.isnan(v) else -math.inf


def _initial_inverse_hessian(grad, x, g):
    p = len(x)
    try:
        H = fd_jacobian(grad, x)
        H = 0.5 * (H + H.T)
        if np.all(np.isfinite(H)):
            evals = np.linalg.eigvalsh(-H)
            if evals.min() > 1e-12 * max(1.0, evals.max()):
                return np.linalg.inv(-H)
    except (ValueError, ArithmeticError, np.linalg.LinAlgError):
        pass
    gn = float(np.max(np.abs(g)))
    return np.eye(p) * (1.0 / gn if gn > 0 else 1.0) * 1e-2 * (1.0 + float(np.max(np.abs(x))))


def _rounding_floor_step(fun, grad, x, f, g):
    d = _initial_inverse_hessian(grad, x, g) @ g
    gmax = float(np.max(np.abs(g)))
    t = 1.0
    while t > 1e-6:
        xn = x + t * d
        fn = _safe(fun, xn)
        if math.isfinite(fn) and fn >= f - 1e-12 * (1.0 + abs(f)):
            try:
                gn = np.asarray(grad(xn), dtype=float)
            except (ValueError, ArithmeticError, np.linalg.LinAlgError):
                gn = None
            if gn is not None and np.all(np.isfinite(gn)) and float(np.max(np.abs(gn))) < gmax:
                return xn, fn, gn
        t *= 0.5
    return None


def bfgs_ascent(fun, grad, x0, gtol: float, max_iter: int = 200) -> OptResult:
    x = np.asarray(x0, dtype=float).copy()
    f = _safe(fun, x)
    if not math.isfinite(f):
        return OptResult(x, f, np.full_like(x, np.nan), Status.INFEASIBLE, 0)
    g = np.asarray(grad(x), dtype=float)
    Hinv = _initial_inverse_hessian(grad, x, g)
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) <= gtol:
            return OptResult(x, f, g, Status.CONVERGED, it - 1)
        d = Hinv @ g
        slope = float(g @ d)
        if not slope > 0:
            Hinv = _initial_inverse_hessian(grad, x, g)
            d = Hinv @ g
            slope = float(g @ d)
            if not slope > 0:
                d = g * (1e-2 / max(1e-300, float(np.max(np.abs(g)))))
                slope = float(g @ d)
        t = 1.0
        accepted = False
        if slope < 64 * np.finfo(float).eps * (1.0 + abs(f)):
            t = 0.0  # predicted gain is below the rounding noise of f
        while t > 1e-12:
            xn = x + t * d
            fn = _safe(fun, xn)
            if math.isfinite(fn) and fn >= f + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # f is at its rounding floor: switch to a Newton step on the
            # gradient and accept any step length that flattens it
            step = _rounding_floor_step(fun, grad, x, f, g)
            if step is None:
                return OptResult(x, f, g, Status.MAX_ITERATIONS, it)
            x, f, g = step
            Hinv = _initial_inverse_hessian(grad, x, g)
            continue
        gn = np.asarray(grad(xn), dtype=float)
        s = xn - x
        y = -(gn - g)
        sy = float(s @ y)
        if sy > 1e-300:
            rho = 1.0 / sy
            I = np.eye(len(x))
            Hinv = (I - rho * np.outer(s, y)) @ Hinv @ (I - rho * np.outer(y, s)) + rho * np.outer(s, s)
        x, f, g = xn, fn, gn
    status = Status.CONVERGED if np.max(np.abs(g)) <= gtol else Status.MAX_ITERATIONS
    return OptResult(x, f, g, status, max_iter)


def simplex_search(fun, x0, max_iter: int = 2000) -> np.ndarray:
    """Derivative-free Nelder-Mead search; ``-inf`` regions are walls."""
    x0 = np.asarray(x0, dtype=float)

    def neg(x):
        v = _safe(fun, x)
        return -v if math.isfinite(v) else 1e300

    step = 0.05 * (np.abs(x0) + 0.05)
    simplex = np.vstack([x0] + [x0 + np.eye(len(x0))[j] * step[j] for j in range(len(x0))])
    res = minimize(neg, x0, method="Nelder-Mead",
                   options={"maxiter": max_iter, "xatol": 1e-10, "fatol": 1e-12, "initial_simplex": simplex})
    return res.x


def maximize(fun, grad, x0, gtol: float, max_iter: int = 200) -> OptResult:
    """Maximize ``fun`` by quasi-Newton ascent, with simplex fallback.

    The fallback runs when the start is infeasible or the line search stalls
    away from a stationary point; a final quasi-Newton polish follows it.
    """
    res = bfgs_ascent(fun, grad, x0, gtol, max_iter)
    if res.status is Status.CONVERGED:
        return res
    start = np.asarray(x0, dtype=float) if res.status is Status.INFEASIBLE else res.x
    x_nm = simplex_search(fun, start)
    if not math.isfinite(_safe(fun, x_nm)):
        return OptResult(res.x, res.fun, res.grad, res.status, res.nit, True)
    polished = bfgs_ascent(fun, grad, x_nm, gtol, max_iter)
    polished.fallback_used = True
    polished.nit += res.nit
    if res.status is not Status.INFEASIBLE and math.isfinite(res.fun) and res.fun > polished.fun:
        return OptResult(res.x, res.fun, res.grad, res.status, polished.nit, True)
    return polished
