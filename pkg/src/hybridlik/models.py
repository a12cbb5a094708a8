"""Parametric models, estimating functions and control maps.

Observations are numpy arrays with one row per observation: shape ``(n,)`` for
univariate data, ``(n, k)`` for multivariate rows such as ``(y, x1, ..., xd)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import special, stats


class DomainError(ValueError):
    pass


class ParametricModel:
    """Base class. Subclasses supply ``logpdf`` and ``score``.

    ``cdf(t, theta)`` is ``P(Y <= t)`` and ``cdf_left(t, theta)`` is
    ``P(Y < t)``; they differ only for discrete models.
    """

    name = "model"
    param_names: tuple = ()
    discrete = False

    @property
    def dim(self) -> int:
        return len(self.param_names)

    def in_domain(self, theta) -> bool:
        return bool(np.all(np.isfinite(theta)))

    def logpdf(self, ys, theta) -> np.ndarray:
        raise NotImplementedError

    def score(self, ys, theta) -> np.ndarray:
        raise NotImplementedError

    def loglik(self, ys, theta) -> float:
        if not self.in_domain(theta):
            return -math.inf
        with np.errstate(divide="ignore", invalid="ignore"):
            lp = self.logpdf(ys, theta)
        total = float(np.sum(lp))
        return total if math.isfinite(total) else -math.inf

    def cdf(self, t, theta):
        raise NotImplementedError(f"{self.name} has no cdf")

    def cdf_grad(self, t, theta):
        raise NotImplementedError(f"{self.name} has no cdf gradient")

    def cdf_left(self, t, theta):
        return self.cdf(t, theta)

    def cdf_left_grad(self, t, theta):
        return self.cdf_grad(t, theta)

    def quantile(self, p, theta) -> float:
        raise NotImplementedError(f"{self.name} has no quantile function")

    def sample(self, rng: np.random.Generator, theta, n: int) -> np.ndarray:
        raise NotImplementedError(f"{self.name} has no sampler")

    def initial(self, ys) -> np.ndarray:
        """Crude starting value (moment based)."""
        raise NotImplementedError

    def mle(self, ys) -> np.ndarray:
        """Maximum likelihood estimate; closed form where available."""
        from .optimize import maximize

        res = maximize(lambda th: self.loglik(ys, th),
                       lambda th: self.score(ys, th).sum(axis=0),
                       self.initial(ys), gtol=1e-9 * max(1, len(ys)))
        return res.x

    def __repr__(self):
        return f"{type(self).__name__}()"


class WeibullModel(ParametricModel):
    """``F(y) = 1 - exp(-(y/scale)^shape)``, parameters ``(scale, shape)``."""

    name = "weibull"
    param_names = ("scale", "shape")

    def in_domain(self, theta):
        lam, k = theta
        return bool(lam > 0 and k > 0 and np.isfinite(lam) and np.isfinite(k))

    def logpdf(self, ys, theta):
        lam, k = theta
        ys = np.asarray(ys, dtype=float)
        r = ys / lam
        return np.where(ys > 0, np.log(k / lam) + (k - 1) * np.log(r) - r**k, -np.inf)

    def score(self, ys, theta):
        lam, k = theta
        ys = np.asarray(ys, dtype=float)
        r = ys / lam
        rk = r**k
        d_lam = (k / lam) * (rk - 1.0)
        d_k = 1.0 / k + np.log(r) * (1.0 - rk)
        return np.column_stack([d_lam, d_k])

    def cdf(self, t, theta):
        lam, k = theta
        t = np.asarray(t, dtype=float)
        with np.errstate(invalid="ignore", over="ignore"):
            z = np.where(t > 0, (np.maximum(t, 0) / lam) ** k, 0.0)
        return np.where(np.isposinf(t), 1.0, -np.expm1(-z))

    def cdf_grad(self, t, theta):
        lam, k = theta
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.zeros(t.shape + (2,))
        ok = (t > 0) & np.isfinite(t)
        r = t[ok] / lam
        z = r**k
        e = np.exp(-z)
        out[ok, 0] = -e * z * k / lam
        out[ok, 1] = e * z * np.log(r)
        return out

    def quantile(self, p, theta):
        lam, k = theta
        return float(lam * (-math.log1p(-p)) ** (1.0 / k))

    def sample(self, rng, theta, n):
        lam, k = theta
        return lam * rng.weibull(k, size=n)

    def initial(self, ys):
        ys = np.asarray(ys, dtype=float)
        ly = np.log(ys)
        k = 1.2825 / max(np.std(ly), 1e-8)
        lam = float(np.exp(np.mean(ly) + 0.5772 / k))
        return np.array([lam, k])


class NormalModel(ParametricModel):
    """Parameters ``(mean, sd)``."""

    name = "normal"
    param_names = ("mean", "sd")

    def in_domain(self, theta):
        return bool(theta[1] > 0 and np.all(np.isfinite(theta)))

    def logpdf(self, ys, theta):
        m, s = theta
        z = (np.asarray(ys, dtype=float) - m) / s
        return -0.5 * z * z - math.log(s) - 0.5 * math.log(2 * math.pi)

    def score(self, ys, theta):
        m, s = theta
        z = (np.asarray(ys, dtype=float) - m) / s
        return np.column_stack([z / s, (z * z - 1.0) / s])

    def cdf(self, t, theta):
        m, s = theta
        return special.ndtr((np.asarray(t, dtype=float) - m) / s)

    def cdf_grad(self, t, theta):
        m, s = theta
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.zeros(t.shape + (2,))
        ok = np.isfinite(t)
        z = (t[ok] - m) / s
        dens = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
        out[ok, 0] = -dens / s
        out[ok, 1] = -dens * z / s
        return out

    def quantile(self, p, theta):
        m, s = theta
        return float(m + s * special.ndtri(p))

    def sample(self, rng, theta, n):
        return rng.normal(theta[0], theta[1], size=n)

    def initial(self, ys):
        ys = np.asarray(ys, dtype=float)
        return np.array([ys.mean(), max(ys.std(), 1e-8)])

    def mle(self, ys):
        return self.initial(ys)


class GeometricModel(ParametricModel):
    """``log f_p(y) = y log(1-p) + log p`` on ``y = 0, 1, ...``."""

    name = "geometric"
    param_names = ("p",)
    discrete = True

    def in_domain(self, theta):
        p = theta[0]
        return bool(0.0 < p < 1.0)

    def logpdf(self, ys, theta):
        p = theta[0]
        ys = np.asarray(ys, dtype=float)
        return ys * math.log1p(-p) + math.log(p)

    def score(self, ys, theta):
        p = theta[0]
        ys = np.asarray(ys, dtype=float)
        return (-ys / (1.0 - p) + 1.0 / p)[:, None]

    def _count_below(self, t, strict):
        # number of support points 0..m with y <= t (or y < t)
        t = np.asarray(t, dtype=float)
        with np.errstate(invalid="ignore"):
            k = np.ceil(t) if strict else np.floor(t) + 1.0
        return np.where(t < 0 if not strict else t <= 0, 0.0, k)

    def _cdf_count(self, k, p):
        with np.errstate(invalid="ignore"):
            out = -np.expm1(k * math.log1p(-p))
        return np.where(np.isposinf(k), 1.0, out)

    def _cdf_count_grad(self, k, p):
        k = np.atleast_1d(k)
        out = np.zeros(k.shape + (1,))
        ok = np.isfinite(k) & (k > 0)
        out[ok, 0] = k[ok] * (1.0 - p) ** (k[ok] - 1.0)
        return out

    def cdf(self, t, theta):
        return self._cdf_count(self._count_below(t, strict=False), theta[0])

    def cdf_left(self, t, theta):
        return self._cdf_count(self._count_below(t, strict=True), theta[0])

    def cdf_grad(self, t, theta):
        return self._cdf_count_grad(self._count_below(t, strict=False), theta[0])

    def cdf_left_grad(self, t, theta):
        return self._cdf_count_grad(self._count_below(t, strict=True), theta[0])

    def quantile(self, p, theta):
        q = math.ceil(math.log1p(-p) / math.log1p(-theta[0]) - 1.0)
        return float(max(q, 0))

    def sample(self, rng, theta, n):
        # numpy's geometric counts trials, starting at 1
        return (rng.geometric(theta[0], size=n) - 1).astype(float)

    def initial(self, ys):
        return np.array([1.0 / (1.0 + float(np.mean(ys)))])

    def mle(self, ys):
        return self.initial(ys)


class ShiftedLogNormalModel(ParametricModel):
    """``log(Y - shift) ~ N(meanlog, sdlog^2)``; parameters ``(shift, meanlog, sdlog)``."""

    name = "shifted-lognormal"
    param_names = ("shift", "meanlog", "sdlog")

    def in_domain(self, theta):
        return bool(theta[2] > 0 and np.all(np.isfinite(theta)))

    def logpdf(self, ys, theta):
        s, m, sd = theta
        d = np.asarray(ys, dtype=float) - s
        with np.errstate(divide="ignore", invalid="ignore"):
            ld = np.log(d)
            z = (ld - m) / sd
            out = -ld - math.log(sd) - 0.5 * math.log(2 * math.pi) - 0.5 * z * z
        return np.where(d > 0, out, -np.inf)

    def score(self, ys, theta):
        s, m, sd = theta
        d = np.asarray(ys, dtype=float) - s
        ld = np.log(d)
        z = (ld - m) / sd
        d_s = 1.0 / d + z / (sd * d)
        d_m = z / sd
        d_sd = (z * z - 1.0) / sd
        return np.column_stack([d_s, d_m, d_sd])

    def cdf(self, t, theta):
        s, m, sd = theta
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (np.log(np.maximum(t - s, 0.0)) - m) / sd
        return np.where(t > s, special.ndtr(z), 0.0)

    def cdf_grad(self, t, theta):
        s, m, sd = theta
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.zeros(t.shape + (3,))
        ok = np.isfinite(t) & (t > s)
        d = t[ok] - s
        z = (np.log(d) - m) / sd
        dens = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
        out[ok, 0] = -dens / (sd * d)
        out[ok, 1] = -dens / sd
        out[ok, 2] = -dens * z / sd
        return out

    def quantile(self, p, theta):
        s, m, sd = theta
        return float(s + math.exp(m + sd * special.ndtri(p)))

    def sample(self, rng, theta, n):
        s, m, sd = theta
        return s + rng.lognormal(m, sd, size=n)

    def initial(self, ys):
        ys = np.asarray(ys, dtype=float)
        spread = max(float(np.ptp(ys)), 1e-8)
        shift = float(ys.min()) - 0.1 * spread
        ld = np.log(ys - shift)
        return np.array([shift, ld.mean(), max(ld.std(), 1e-8)])

    def loglik(self, ys, theta):
        if self.in_domain(theta) and theta[0] >= np.min(ys) - 1e-8:
            return -math.inf
        return super().loglik(ys, theta)


MODELS = {
    "weibull": WeibullModel,
    "normal": NormalModel,
    "geometric": GeometricModel,
    "shifted-lognormal": ShiftedLogNormalModel,
}


def get_model(name: str) -> ParametricModel:
    try:
        return MODELS[name]()
    except KeyError:
        raise KeyError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None


def weibull_model() -> WeibullModel:
    return WeibullModel()


def normal_model() -> NormalModel:
    return NormalModel()


def geometric_model() -> GeometricModel:
    return GeometricModel()


def shifted_lognormal_model() -> ShiftedLogNormalModel:
    return ShiftedLogNormalModel()


# ---------------------------------------------------------------------------
# estimating functions and control maps


@dataclass(frozen=True)
class EstimatingFunction:
    """Constraint map ``m(y, mu[, P])`` returning an ``(n, q)`` array.

    ``dm_dmu`` returns ``(n, q, s)``; ``dm_dP`` (plug-in problems only) returns
    ``(n, q, r)``.
    """

    q: int
    s: int
    m: Callable
    dm_dmu: Callable
    r: int = 0
    dm_dP: Optional[Callable] = None
    name: str = "m"

    def __call__(self, ys, mu, plugin=None):
        return self.m(ys, np.asarray(mu, dtype=float), plugin)

    def jac(self, ys, mu, plugin=None):
        return self.dm_dmu(ys, np.asarray(mu, dtype=float), plugin)


@dataclass(frozen=True)
class ControlMap:
    """``mu(theta[, P])`` (length ``s``) with ``jacobian`` of shape ``(s, p)``."""

    s: int
    mu: Callable
    jacobian: Callable
    name: str = "mu"

    def __call__(self, theta, plugin=None):
        return np.atleast_1d(np.asarray(self.mu(np.asarray(theta, dtype=float), plugin), dtype=float))

    def jac(self, theta, plugin=None):
        return np.atleast_2d(np.asarray(self.jacobian(np.asarray(theta, dtype=float), plugin), dtype=float))


def _column(ys):
    ys = np.asarray(ys, dtype=float)
    return ys if ys.ndim == 1 else ys[:, 0]


def _minus_identity(n, s):
    return np.broadcast_to(-np.eye(s), (n, s, s))


def moment_ef(power: int) -> EstimatingFunction:
    """``m(y, mu) = y**power - mu``."""
    return EstimatingFunction(
        q=1, s=1,
        m=lambda ys, mu, P=None: (_column(ys) ** power - mu[0])[:, None],
        dm_dmu=lambda ys, mu, P=None: _minus_identity(len(ys), 1),
        name=f"moment:{power}",
    )


def weibull_moment_control(power: int) -> ControlMap:
    """``mu(scale, shape) = scale**power * Gamma(1 + power/shape)``."""
    if power < 1 or int(power) != power:
        raise ValueError("moment order must be a positive integer")

    def mu(theta, P=None):
        lam, k = theta
        if lam <= 0 or k <= 0:
            raise DomainError("Weibull parameters must be positive")
        return [lam**power * special.gamma(1.0 + power / k)]

    def jac(theta, P=None):
        lam, k = theta
        g = special.gamma(1.0 + power / k)
        return [[power * lam ** (power - 1) * g,
                 -lam**power * g * special.digamma(1.0 + power / k) * power / k**2]]

    return ControlMap(s=1, mu=mu, jacobian=jac, name=f"weibull-moment:{power}")


def _check_cuts(cuts):
    cuts = np.asarray(cuts, dtype=float)
    if cuts.ndim != 1 or len(cuts) < 2:
        raise ValueError("need at least two cut points")
    if np.any(np.diff(cuts) <= 0):
        raise ValueError("cut points must be strictly increasing")
    return cuts


def histogram_control(model: ParametricModel, cuts):
    """Cell-probability control for cells ``[c_{j-1}, c_j)``, last cell dropped.

    With ``k >= 2`` cells the constraint and control dimension is ``k - 1``.
    """
    if len(cuts) < 3:
        raise ValueError("a histogram control needs at least two cells")
    return _cell_control(model, cuts)


def _cell_control(model, cuts):
    cuts = _check_cuts(cuts)
    ncell = len(cuts) - 1
    s = max(ncell - 1, 1)
    lo, hi = cuts[:s], cuts[1:s + 1]

    def m(ys, mu, P=None):
        y = _column(ys)[:, None]
        return ((y >= lo) & (y < hi)).astype(float) - mu

    def dm(ys, mu, P=None):
        return _minus_identity(len(ys), s)

    def mu(theta, P=None):
        return model.cdf_left(hi, theta) - model.cdf_left(lo, theta)

    def jac(theta, P=None):
        return model.cdf_left_grad(hi, theta) - model.cdf_left_grad(lo, theta)

    label = ",".join(f"{c:g}" for c in cuts)
    ef = EstimatingFunction(q=s, s=s, m=m, dm_dmu=dm, name=f"histogram:{label}")
    return ef, ControlMap(s=s, mu=mu, jacobian=jac, name=f"histogram:{label}")


def weibull_histogram_control(cuts):
    return histogram_control(WeibullModel(), cuts)


def interval_control(model: ParametricModel, b: float, c: float):
    """``m(y, mu) = I(b <= y < c) - mu`` with ``mu(theta) = P(b <= Y < c)``."""
    if not b < c:
        raise ValueError("interval requires b < c")
    return _cell_control(model, [b, c])


def cdf_control(model: ParametricModel, t: float):
    """``m(y, mu) = I(y <= t) - mu`` with ``mu(theta) = P(Y <= t)``."""

    def m(ys, mu, P=None):
        return ((_column(ys) <= t).astype(float) - mu[0])[:, None]

    def dm(ys, mu, P=None):
        return _minus_identity(len(ys), 1)

    def mu(theta, P=None):
        return np.atleast_1d(model.cdf(t, theta))

    def jac(theta, P=None):
        return np.atleast_2d(model.cdf_grad(t, theta)[0])

    return (EstimatingFunction(q=1, s=1, m=m, dm_dmu=dm, name=f"cdf:{t:g}"),
            ControlMap(s=1, mu=mu, jacobian=jac, name=f"cdf:{t:g}"))


def geometric_cdf_control(t: float = 1.0):
    return cdf_control(GeometricModel(), t)


def identity_control(dim: int) -> ControlMap:
    """``mu(theta) = theta``; the only control allowed at ``a = 1``."""
    return ControlMap(s=dim, mu=lambda th, P=None: th, jacobian=lambda th, P=None: np.eye(dim),
                      name="identity")


def plugin_variance_ef() -> EstimatingFunction:
    """``m(y, sigma2, P) = (y - P)^2 - sigma2`` with the mean ``P`` plugged in."""

    def m(ys, mu, P):
        return ((_column(ys) - P[0]) ** 2 - mu[0])[:, None]

    def dm(ys, mu, P):
        return _minus_identity(len(ys), 1)

    def dP(ys, mu, P):
        return (-2.0 * (_column(ys) - P[0]))[:, None, None]

    return EstimatingFunction(q=1, s=1, m=m, dm_dmu=dm, r=1, dm_dP=dP, name="plugin-variance")


def truncate_sample(ys, K: float) -> np.ndarray:
    """Clamp observations to ``[-K, K]`` keeping their sign."""
    if K <= 0:
        raise ValueError("K must be positive")
    ys = np.asarray(ys, dtype=float)
    return np.sign(ys) * np.minimum(K, np.abs(ys))


def poisson_sampler(rate: float, truncate: float = 30.0):
    """Draw ``Poisson(rate)`` samples clipped at ``truncate``."""

    def draw(rng: np.random.Generator, n: int) -> np.ndarray:
        return np.minimum(rng.poisson(rate, size=n), truncate).astype(float)

    return draw


def poisson_cdf(t: float, rate: float) -> float:
    return float(stats.poisson.cdf(t, rate))


def parse_control(model: ParametricModel, spec: str):
    """Build ``(EstimatingFunction, ControlMap)`` from a text spec.

    Grammar: ``moment:l`` (Weibull only), ``interval:b,c``,
    ``histogram:c0,...,ck`` or ``cdf:t``.
    """
    kind, _, arg = spec.partition(":")
    try:
        if kind == "moment":
            if not isinstance(model, WeibullModel):
                raise ValueError("moment control is available for the Weibull model only")
            power = int(arg)
            return moment_ef(power), weibull_moment_control(power)
        if kind == "interval":
            b, c = (float(v) for v in arg.split(","))
            return interval_control(model, b, c)
        if kind == "histogram":
            return histogram_control(model, [float(v) for v in arg.split(",")])
        if kind == "cdf":
            return cdf_control(model, float(arg))
    except (TypeError, ValueError) as exc:
        raise ValueError(f"bad control spec {spec!r}: {exc}") from None
    raise ValueError(f"unknown control {spec!r}; use moment:l, interval:b,c, histogram:c0,...,ck or cdf:t")
