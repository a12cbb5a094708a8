"""Focused information criterion for hybrid fits and balance selection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .estimator import HLFit, HLProblem, fit_path
from .inference import SandwichEstimates, StackedEstimates, sandwich
from .optimize import fd_jacobian


def _zero_c(fit, sample) -> float:
    return 0.0


@dataclass(frozen=True)
class FocusSpec:
    """Focus parameter: its model value ``g(theta)`` and a nonparametric estimate.

    ``phi(ys, xi)`` is the influence function of ``xi_hat``, vectorized over
    observations. ``c_provider(fit, sample)`` returns the bias-correction
    constant (zero by default).
    """

    g: Callable
    xi_hat: Callable
    phi: Callable
    grad_g: Optional[Callable] = None
    c_provider: Callable = _zero_c
    name: str = "focus"

    def gradient(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self.grad_g is not None:
            return np.asarray(self.grad_g(theta), dtype=float)
        return fd_jacobian(lambda th: np.atleast_1d(self.g(th)), theta, rel_step=1e-6)[0]


@dataclass
class HficRecord:
    a: float
    theta_hat: np.ndarray
    focus: float
    b_hat: float
    c_hat: float
    kappa_hat: float
    tau_hat: float
    score: float
    converged: bool = True


@dataclass
class HficReport:
    grid: list
    records: list
    a_star: float
    n: int
    xi_hat: float
    failures: int = 0

    @property
    def best(self) -> HficRecord:
        return next(r for r in self.records if r.a == self.a_star)

    def table(self) -> list[dict]:
        return [{"a": r.a, "theta_hat": [float(t) for t in r.theta_hat], "focus": r.focus,
                 "b_hat": r.b_hat, "c_hat": r.c_hat, "kappa_hat": r.kappa_hat, "tau_hat": r.tau_hat,
                 "score": r.score} for r in self.records]


def hfic_formula(b: float, c: float, kappa: float, tau: float, n: int) -> float:
    """``max{b^2 - (2bc + kappa)/n, 0} + tau/n``."""
    return max(b * b - (2.0 * b * c + kappa) / n, 0.0) + tau / n


def hfic_score(fit: HLFit, estimates: SandwichEstimates, focus: FocusSpec, sample=None) -> HficRecord:
    sample = fit.problem.sample if sample is None else np.asarray(sample, dtype=float)
    n = len(sample)
    theta = fit.theta_hat
    xi = float(focus.xi_hat(sample))
    phi = np.asarray(focus.phi(sample, xi), dtype=float)
    grad = focus.gradient(theta)
    gval = float(focus.g(theta))
    Jinv = np.linalg.inv(estimates.J_hat)
    tau = float(grad @ Jinv @ estimates.K_hat @ Jinv.T @ grad)
    V = estimates.psi_grad.T @ phi / n
    kappa = tau + float(phi @ phi) / n - 2.0 * float(grad @ Jinv @ V)
    b = gval - xi
    c = float(focus.c_provider(fit, sample))
    return HficRecord(a=fit.a, theta_hat=theta, focus=gval, b_hat=b, c_hat=c, kappa_hat=kappa,
                      tau_hat=tau, score=hfic_formula(b, c, kappa, tau, n), converged=fit.converged)


def hfic_plugin_score(fit: HLFit, stacked: StackedEstimates, focus: FocusSpec, sample=None) -> HficRecord:
    """Score for plug-in fits from the stacked sandwich.

    The focus gradient is padded with zeros over the multiplier and plug-in
    coordinates. The stacked parameter expansion is
    ``alpha_hat - alpha = -A^{-1} mean(psi)``, hence the sign of the cross term.
    """
    sample = fit.problem.sample if sample is None else np.asarray(sample, dtype=float)
    n = len(sample)
    theta = fit.theta_hat
    xi = float(focus.xi_hat(sample))
    phi = np.asarray(focus.phi(sample, xi), dtype=float)
    dim = stacked.C_hat.shape[0]
    grad = np.zeros(dim)
    grad[: stacked.p] = focus.gradient(theta)
    tau = float(grad @ stacked.C_hat @ grad)
    cross = np.linalg.solve(stacked.A_hat, stacked.psi.T @ phi / n)
    kappa = tau + float(phi @ phi) / n + 2.0 * float(grad @ cross)
    gval = float(focus.g(theta))
    b = gval - xi
    c = float(focus.c_provider(fit, sample))
    return HficRecord(a=fit.a, theta_hat=theta, focus=gval, b_hat=b, c_hat=c, kappa_hat=kappa,
                      tau_hat=tau, score=hfic_formula(b, c, kappa, tau, n), converged=fit.converged)


def select_balance(records) -> float:
    """Grid value with the smallest score; ties go to the smaller ``a``."""
    usable = [r for r in records if r.converged and math.isfinite(r.score)]
    if not usable:
        raise RuntimeError("no balance parameter produced a usable HFIC score")
    best = min(r.score for r in usable)
    return min(r.a for r in usable if r.score == best)


def hfic_scan(problem: HLProblem, focus: FocusSpec, grid, init=None, fits=None) -> HficReport:
    """Fit along ``grid`` (warm-started) and score every balance value."""
    grid = [float(a) for a in grid]
    if not grid:
        raise ValueError("empty a-grid")
    if any(not 0.0 <= a < 1.0 for a in grid):
        raise ValueError("a-grid must lie in [0, 1)")
    if fits is None:
        fits = fit_path(problem, grid, init=init)
    records = []
    failures = 0
    for fit in fits:
        if not fit.converged:
            failures += 1
            continue
        try:
            est = sandwich(fit)
            records.append(hfic_score(fit, est, focus))
        except (np.linalg.LinAlgError, ArithmeticError, ValueError):
            failures += 1
    if not records:
        raise RuntimeError("all hybrid fits failed on the a-grid")
    xi = float(focus.xi_hat(problem.sample))
    return HficReport(grid=grid, records=records, a_star=select_balance(records), n=problem.n,
                      xi_hat=xi, failures=failures)


# ---------------------------------------------------------------------------
# built-in foci


def silverman_bandwidth(x) -> float:
    x = np.asarray(x, dtype=float)
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * len(x) ** (-0.2)


def gaussian_kde(x, at: float, bandwidth: float | None = None) -> float:
    """Gaussian kernel density estimate of the sample ``x`` at one point."""
    x = np.asarray(x, dtype=float)
    h = silverman_bandwidth(x) if bandwidth is None else bandwidth
    if not h > 0:
        raise ValueError("kernel bandwidth must be positive")
    u = (at - x) / h
    return float(np.exp(-0.5 * u * u).sum() / (len(x) * h * math.sqrt(2 * math.pi)))


BANDWIDTH_RULES = {"silverman": silverman_bandwidth}


def quantile_focus(p: float, model=None, bandwidth_rule: str = "silverman") -> FocusSpec:
    """Focus on the ``p``-quantile with a kernel-density influence function."""
    if not 0.0 < p < 1.0:
        raise ValueError("quantile level must lie in (0, 1)")
    rule = BANDWIDTH_RULES[bandwidth_rule]

    def xi_hat(ys):
        return float(np.quantile(np.asarray(ys, dtype=float), p))

    def phi(ys, xi):
        ys = np.asarray(ys, dtype=float)
        if len(ys) < 10:
            raise ValueError("quantile focus needs at least 10 observations")
        dens = gaussian_kde(ys, xi, rule(ys))
        if dens < 1e-12:
            raise ValueError("density estimate at the quantile is ~0; focus undefined")
        return ((ys <= xi).astype(float) - p) / dens

    def g(theta):
        if model is None:
            raise ValueError("quantile focus needs a model for g(theta)")
        return model.quantile(p, theta)

    return FocusSpec(g=g, xi_hat=xi_hat, phi=phi, name=f"quantile:{p:g}")


def cdf_focus(model, t: float) -> FocusSpec:
    """Focus on ``P(Y <= t)`` estimated by the empirical frequency."""

    def col(ys):
        ys = np.asarray(ys, dtype=float)
        return ys if ys.ndim == 1 else ys[:, 0]

    return FocusSpec(
        g=lambda th: float(np.atleast_1d(model.cdf(t, th))[0]),
        grad_g=lambda th: model.cdf_grad(t, th)[0],
        xi_hat=lambda ys: float(np.mean(col(ys) <= t)),
        phi=lambda ys, xi: (col(ys) <= t).astype(float) - xi,
        name=f"cdf:{t:g}",
    )


def mean_focus(model_mean: Callable, model_mean_grad: Callable | None = None) -> FocusSpec:
    """Focus on the mean; ``model_mean(theta)`` gives its model value."""

    def col(ys):
        ys = np.asarray(ys, dtype=float)
        return ys if ys.ndim == 1 else ys[:, 0]

    return FocusSpec(g=model_mean, grad_g=model_mean_grad,
                     xi_hat=lambda ys: float(np.mean(col(ys))),
                     phi=lambda ys, xi: col(ys) - xi, name="mean")


def parse_focus(model, spec: str, control_spec: str | None = None) -> FocusSpec:
    """Focus from text: ``cdf:t``, ``quantile:p`` or ``control`` (for a ``cdf:t`` control)."""
    if spec == "control":
        if not control_spec or not control_spec.startswith("cdf:"):
            raise ValueError("focus 'control' needs a scalar cdf:t control")
        spec = control_spec
    kind, _, arg = spec.partition(":")
    if kind == "cdf":
        return cdf_focus(model, float(arg))
    if kind == "quantile":
        return quantile_focus(float(arg), model)
    raise ValueError(f"unknown focus {spec!r}; use control, cdf:t or quantile:p")
