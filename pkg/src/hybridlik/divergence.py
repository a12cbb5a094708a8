"""Hybrid divergence between a known discrete distribution and a model.

The MHL estimator converges to the minimizer of this divergence, which makes
it a population-level oracle for simulation checks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .el import ConstraintError, solve_lambda
from .optimize import maximize

TAIL_MASS = 1e-12


@dataclass(frozen=True)
class DiscreteDistribution:
    support: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        support = np.asarray(self.support, dtype=float)
        probs = np.asarray(self.probs, dtype=float)
        if support.shape != probs.shape or support.ndim != 1:
            raise ValueError("support and probs must be matching 1-d arrays")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("probs must be nonnegative and sum to one")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probs", probs)

    def cdf(self, t: float) -> float:
        return float(self.probs[self.support <= t].sum())

    def mean(self) -> float:
        return float(self.probs @ self.support)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.choice(self.support, size=n, p=self.probs)


def _from_pmf(pmf, tail_mass=TAIL_MASS, max_support=100_000):
    ks = []
    ps = []
    total = 0.0
    k = 0
    while total < 1.0 - tail_mass and k < max_support:
        pk = float(pmf(k))
        ks.append(k)
        ps.append(pk)
        total += pk
        k += 1
    ps = np.array(ps)
    return DiscreteDistribution(np.array(ks, dtype=float), ps / ps.sum())


def poisson_distribution(rate: float, tail_mass: float = TAIL_MASS) -> DiscreteDistribution:
    """Poisson pmf truncated once the cumulative mass reaches ``1 - tail_mass``."""
    return _from_pmf(lambda k: stats.poisson.pmf(k, rate), tail_mass)


def geometric_distribution(p: float, tail_mass: float = TAIL_MASS) -> DiscreteDistribution:
    return _from_pmf(lambda k: p * (1.0 - p) ** k, tail_mass)


def population_multiplier(g: DiscreteDistribution, M: np.ndarray):
    """Multiplier solving ``E_g[M / (1 + lam'M)] = 0``; ``None`` if infeasible."""
    try:
        sol = solve_lambda(M, weights=g.probs)
    except ConstraintError:
        return None
    return sol if sol.converged else None


def _parts(g, model, ef, control, theta, a):
    theta = np.asarray(theta, dtype=float)
    if not model.in_domain(theta):
        return None
    with np.errstate(divide="ignore"):
        logf = model.logpdf(g.support, theta)
    pos = g.probs > 0
    if not np.all(np.isfinite(logf[pos])):
        return None
    kl = float(g.probs[pos] @ (np.log(g.probs[pos]) - logf[pos]))
    if a == 0.0:
        return kl, 0.0, None
    mu = control(theta)
    M = ef(g.support, mu)
    sol = population_multiplier(g, M)
    if sol is None:
        return None
    return kl, -sol.log_el, sol


def hybrid_divergence(g: DiscreteDistribution, model, ef, control, theta, a: float) -> float:
    """``(1-a) KL(g, f_theta) + a * min{KL(g, h) : E_h m(Y, mu(theta)) = 0}``.

    ``+inf`` when the model misses a support point or the control value cannot
    be matched by any reweighting of ``g``.
    """
    parts = _parts(g, model, ef, control, theta, a)
    if parts is None:
        return math.inf
    kl, inner, _ = parts
    return (1.0 - a) * kl + a * inner


def divergence_terms(g, model, ef, control, theta):
    """``(KL, constrained-KL)`` at ``theta``; the two endpoints of the divergence."""
    parts = _parts(g, model, ef, control, theta, 1.0)
    if parts is None:
        return math.inf, math.inf
    return parts[0], parts[1]


def _divergence_gradient(g, model, ef, control, theta, a):
    theta = np.asarray(theta, dtype=float)
    pos = g.probs > 0
    grad = -(1.0 - a) * (g.probs[pos] @ model.score(g.support[pos], theta))
    if a > 0.0:
        _, _, sol = _parts(g, model, ef, control, theta, a)
        mu = control(theta)
        M = ef(g.support, mu)
        D = ef.jac(g.support, mu) @ control.jac(theta)
        z = 1.0 + M @ sol.lam
        grad = grad + a * np.einsum("i,iqp,q->p", g.probs / z, D, sol.lam)
    return grad


def limit_theta(g: DiscreteDistribution, model, ef, control, a: float, init=None,
                gtol: float = 1e-11) -> np.ndarray:
    """Minimizer of ``theta -> hybrid_divergence``: the large-sample MHL limit."""
    if init is None:
        init = model.mle(g.sample(np.random.default_rng(0), 5000))
    res = maximize(lambda th: -hybrid_divergence(g, model, ef, control, th, a),
                   lambda th: -_divergence_gradient(g, model, ef, control, th, a),
                   np.asarray(init, dtype=float), gtol=gtol)
    if not math.isfinite(res.fun):
        raise RuntimeError("divergence minimization failed: no feasible parameter found")
    return res.x


def limit_path(g, model, ef, control, grid, init=None):
    """Limits along an a-grid, warm-started like the sample fits."""
    out = []
    x = init
    for a in grid:
        x = limit_theta(g, model, ef, control, float(a), init=x)
        out.append(x)
    return np.array(out)
