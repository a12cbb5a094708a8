import math

import numpy as np
import pytest
from scipy.optimize import minimize

from hybridlik.el import Status
from hybridlik.estimator import (HLProblem, InfeasibleError, Plugin, fit_mhl, fit_mhl_plugin,
                                 fit_path, hl_gradient, hybrid_loglik)
from hybridlik.models import (EstimatingFunction, GeometricModel, NormalModel, geometric_cdf_control,
                              identity_control, interval_control, plugin_variance_ef)
from hybridlik.optimize import fd_jacobian

from conftest import philox

GEOM = GeometricModel()


def geometric_problem(ys, a):
    ef, ctl = geometric_cdf_control(1.0)
    return HLProblem(GEOM, ef, ctl, a, ys)


def poisson_sample(seed, n=100):
    return np.minimum(philox(seed).poisson(1.5, size=n), 30).astype(float)


def test_a_zero_is_loglik():
    ys = poisson_sample(1)
    pb = geometric_problem(ys, 0.0)
    for p in (0.2, 0.4, 0.6):
        assert hybrid_loglik(pb, np.array([p])) == GEOM.loglik(ys, np.array([p]))
    np.testing.assert_allclose(hl_gradient(pb, np.array([0.3])), GEOM.score(ys, np.array([0.3])).sum(axis=0))


def test_two_point_geometric_example():
    ys = np.array([0.0, 3.0])
    pb = geometric_problem(ys, 0.5)
    theta = np.array([0.5])
    from hybridlik.estimator import constraints
    from hybridlik.el import solve_lambda
    M = constraints(pb, theta)
    np.testing.assert_allclose(M[:, 0], [0.25, -0.75])
    sol = solve_lambda(M)
    assert sol.lam[0] == pytest.approx(-4.0 / 3.0, abs=1e-10)
    assert sol.log_el == pytest.approx(math.log(0.75), abs=1e-12)
    # brute force over the weight simplex: w1 * 0.25 - (1 - w1) * 0.75 = 0
    res = minimize(lambda w: -(math.log(2 * w[0]) + math.log(2 * (1 - w[0]))), [0.5], method="SLSQP",
                   bounds=[(1e-9, 1 - 1e-9)],
                   constraints=[{"type": "eq", "fun": lambda w: w[0] * 0.25 - (1 - w[0]) * 0.75}])
    expected = 0.5 * GEOM.loglik(ys, theta) + 0.5 * (-res.fun)
    assert hybrid_loglik(pb, theta) == pytest.approx(expected, abs=1e-8)


def test_balanced_control_has_no_penalty():
    ys = poisson_sample(2)
    freq = np.mean(ys <= 1)
    p = 1 - math.sqrt(1 - freq)  # p(2 - p) = freq
    pb = geometric_problem(ys, 0.6)
    assert hybrid_loglik(pb, np.array([p])) == pytest.approx(0.4 * GEOM.loglik(ys, np.array([p])), abs=1e-12)


@pytest.mark.parametrize("a", [0.1, 0.5, 0.9])
def test_gradient_matches_finite_differences(a):
    ys = poisson_sample(3)
    pb = geometric_problem(ys, a)
    for p in (0.3, 0.37, 0.45):
        th = np.array([p])
        fd = fd_jacobian(lambda t: np.array([hybrid_loglik(pb, t)]), th, rel_step=1e-6)[0]
        np.testing.assert_allclose(hl_gradient(pb, th), fd, rtol=1e-5)


def test_gradient_signals_infeasibility():
    ys = np.array([0.0, 0.0, 1.0, 1.0])  # every observation <= 1
    pb = geometric_problem(ys, 0.5)
    assert hybrid_loglik(pb, np.array([0.3])) == -math.inf
    with pytest.raises(InfeasibleError):
        hl_gradient(pb, np.array([0.3]))


def test_a_zero_fit_is_closed_form_mle():
    for seed in range(10):
        ys = poisson_sample(100 + seed)
        fit = fit_mhl(geometric_problem(ys, 0.0), init=np.array([0.5]))
        assert fit.converged
        assert fit.theta_hat[0] == pytest.approx(1 / (1 + ys.mean()), abs=1e-8)


@pytest.mark.parametrize("a", [0.25, 0.75, 0.99])
def test_fit_is_stationary_and_improves_on_init(a):
    ys = poisson_sample(4)
    pb = geometric_problem(ys, a)
    init = GEOM.mle(ys)
    fit = fit_mhl(pb)
    assert fit.status is Status.CONVERGED
    assert np.max(np.abs(hl_gradient(pb, fit.theta_hat))) <= 1e-8 * pb.n
    assert fit.log_hl >= hybrid_loglik(pb, init)


def test_balanced_sample_invariance():
    ys = np.array([-3.0, -1.0, -0.5, 0.5, 1.0, 3.0])
    ef, ctl = interval_control(NormalModel(), -math.inf, 0.0)
    mle = NormalModel().mle(ys)
    for a in (0.0, 0.3, 0.7, 0.95):
        fit = fit_mhl(HLProblem(NormalModel(), ef, ctl, a, ys))
        np.testing.assert_allclose(fit.theta_hat, mle, atol=1e-7)


def test_path_is_continuous_and_warm_started():
    ys = poisson_sample(5)
    grid = np.round(np.arange(0, 1, 0.05), 2)
    fits = fit_path(geometric_problem(ys, 0.0), grid)
    assert all(f.converged for f in fits)
    ps = np.array([f.theta_hat[0] for f in fits])
    assert np.max(np.abs(np.diff(ps))) < 0.02
    for f, a in zip(fits, grid):
        assert f.a == a


def test_problem_validation():
    ef, ctl = geometric_cdf_control(1.0)
    ys = np.array([0.0, 1.0, 2.0])
    with pytest.raises(ValueError):
        HLProblem(GEOM, ef, ctl, 1.0, ys)
    with pytest.raises(ValueError):
        HLProblem(GEOM, ef, ctl, -0.1, ys)
    with pytest.raises(ValueError):
        HLProblem(None, ef, ctl, 0.5, ys)
    with pytest.raises(ValueError):
        HLProblem(GEOM, plugin_variance_ef(), identity_control(1), 0.5, ys)  # plug-in missing


def _variance_problem(ys, a, P):
    plugin = Plugin(h=lambda y, P: (y - P[0])[:, None], P_hat=np.array([P]))
    return HLProblem(None, plugin_variance_ef(), identity_control(1), a, ys, plugin=plugin)


def test_plugin_variance_at_a_one_is_sample_variance(rng):
    ys = rng.normal(1.0, 2.0, size=300)
    fit = fit_mhl_plugin(_variance_problem(ys, 1.0, ys.mean()), init=np.array([1.0]))
    assert fit.converged
    assert fit.theta_hat[0] == pytest.approx(np.mean((ys - ys.mean()) ** 2), rel=1e-7)


def test_plugin_fixed_at_truth_matches_reduced_problem(rng):
    ys = rng.normal(0.5, 1.5, size=200)
    P0 = 0.5
    reduced = EstimatingFunction(q=1, s=1, m=lambda y, mu, P=None: ((y - P0) ** 2 - mu[0])[:, None],
                                 dm_dmu=lambda y, mu, P=None: -np.ones((len(y), 1, 1)))
    a = 1.0
    f1 = fit_mhl(_variance_problem(ys, a, P0), init=np.array([2.0]))
    f2 = fit_mhl(HLProblem(None, reduced, identity_control(1), a, ys), init=np.array([2.0]))
    np.testing.assert_allclose(f1.theta_hat, f2.theta_hat, rtol=1e-10)


def test_fit_mhl_plugin_requires_plugin():
    with pytest.raises(ValueError):
        fit_mhl_plugin(geometric_problem(poisson_sample(6), 0.5))


def test_identity_control_near_one_approaches_mel(rng):
    # m(y, p) = y - (1 - p)/p: the empirical-likelihood root is 1/(1 + mean)
    ef = EstimatingFunction(q=1, s=1, m=lambda y, mu, P=None: (y - (1 - mu[0]) / mu[0])[:, None],
                            dm_dmu=lambda y, mu, P=None: np.full((len(y), 1, 1), 1 / mu[0] ** 2))
    ys = poisson_sample(7)
    fit = fit_mhl(HLProblem(GEOM, ef, identity_control(1), 0.999, ys))
    assert fit.theta_hat[0] == pytest.approx(1 / (1 + ys.mean()), abs=1e-6)
