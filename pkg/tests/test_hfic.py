import dataclasses
import math

import numpy as np
import pytest

from hybridlik.estimator import HLProblem, Plugin, fit_mhl
from hybridlik.hfic import (BANDWIDTH_RULES, FocusSpec, HficRecord, cdf_focus, hfic_formula, hfic_plugin_score,
                            hfic_scan, hfic_score, parse_focus, quantile_focus, select_balance)
from hybridlik.inference import sandwich, stacked_sandwich
from hybridlik.models import GeometricModel, NormalModel, geometric_cdf_control, identity_control, plugin_variance_ef

from conftest import philox

GEOM = GeometricModel()
EF, CTL = geometric_cdf_control(1.0)
GRID = [round(0.05 * i, 2) for i in range(20)]


def poisson_sample(seed, n=100):
    return np.minimum(philox(seed).poisson(1.5, size=n), 30).astype(float)


def record(a, score):
    return HficRecord(a=a, theta_hat=np.zeros(1), focus=0.0, b_hat=0.0, c_hat=0.0, kappa_hat=0.0,
                      tau_hat=score, score=score)


def test_formula_zero_bias_branch():
    assert hfic_formula(0.0, 0.0, 2.0, 3.0, 100) == pytest.approx(0.03)
    assert hfic_formula(0.0, 0.0, -2.0, 3.0, 100) == pytest.approx(0.02 + 0.03)
    assert hfic_formula(0.01, 0.0, 5.0, 1.0, 100) == pytest.approx(0.01)  # truncated at 0


def test_select_balance_monotone_and_ties():
    assert select_balance([record(a, 0.1 + a) for a in (0.0, 0.3, 0.6)]) == 0.0
    assert select_balance([record(0.6, 0.2), record(0.3, 0.2), record(0.9, 0.5)]) == 0.3
    bad = record(0.0, math.nan)
    with pytest.raises(RuntimeError):
        select_balance([bad])


def test_scan_scores_nonnegative_and_select_in_grid():
    pb = HLProblem(GEOM, EF, CTL, 0.0, poisson_sample(1))
    rep = hfic_scan(pb, cdf_focus(GEOM, 1.0), GRID)
    assert rep.failures == 0
    assert all(r.score >= 0 for r in rep.records)
    assert rep.a_star in GRID
    assert rep.best.a == rep.a_star
    assert rep.xi_hat == pytest.approx(np.mean(pb.sample <= 1))
    assert len(rep.table()) == len(GRID)


def test_singleton_grid():
    pb = HLProblem(GEOM, EF, CTL, 0.0, poisson_sample(2))
    assert hfic_scan(pb, cdf_focus(GEOM, 1.0), [0.0]).a_star == 0.0


def test_scan_rejects_bad_grids_and_total_failure():
    pb = HLProblem(GEOM, EF, CTL, 0.0, poisson_sample(3))
    with pytest.raises(ValueError):
        hfic_scan(pb, cdf_focus(GEOM, 1.0), [0.5, 1.0])
    with pytest.raises(ValueError):
        hfic_scan(pb, cdf_focus(GEOM, 1.0), [])
    stuck = HLProblem(GEOM, EF, CTL, 0.0, np.array([0.0, 1.0, 1.0, 0.0, 1.0]))
    with pytest.raises(RuntimeError):
        hfic_scan(stuck, cdf_focus(GEOM, 1.0), [0.5])


def test_shift_invariance():
    pb = HLProblem(GEOM, EF, CTL, 0.0, poisson_sample(4))
    focus = cdf_focus(GEOM, 1.0)
    shifted = dataclasses.replace(focus, g=lambda th: focus.g(th) + 10.0,
                                  xi_hat=lambda ys: focus.xi_hat(ys) + 10.0,
                                  phi=lambda ys, xi: focus.phi(ys, xi - 10.0))
    r1 = hfic_scan(pb, focus, GRID)
    r2 = hfic_scan(pb, shifted, GRID)
    assert r1.a_star == r2.a_star
    for x, y in zip(r1.records, r2.records):
        assert x.b_hat == pytest.approx(y.b_hat, abs=1e-12)
        assert x.kappa_hat == pytest.approx(y.kappa_hat, rel=1e-10)
        assert x.tau_hat == pytest.approx(y.tau_hat, rel=1e-10)


def test_mle_endpoint_tau_is_delta_variance():
    p = 0.4
    ys = GEOM.sample(philox(5), np.array([p]), 5000)
    fit = fit_mhl(HLProblem(GEOM, EF, CTL, 0.0, ys))
    rec = hfic_score(fit, sandwich(fit), cdf_focus(GEOM, 1.0))
    delta = (2 - 2 * p) ** 2 * p * p * (1 - p)  # g'(p)^2 / J(p)
    assert rec.tau_hat == pytest.approx(delta, rel=0.1)
    assert rec.score >= rec.tau_hat / 5000 - 1e-15


def test_quantile_focus_basics():
    f = quantile_focus(0.5)
    assert f.xi_hat(np.array([-1.0, 0.0, 1.0])) == 0.0
    ys = philox(6).normal(size=4000)
    xi = f.xi_hat(ys)
    phi = f.phi(ys, xi)
    assert abs(phi.mean()) <= 5 / len(ys)
    assert np.mean(phi**2) == pytest.approx(math.pi / 2, rel=0.15)
    with pytest.raises(ValueError):
        f.phi(np.arange(5.0), 2.0)
    with pytest.raises(ValueError):
        f.g(np.array([0.0, 1.0]))
    with pytest.raises(ValueError):
        quantile_focus(1.2)


def test_quantile_focus_density_gap(monkeypatch):
    monkeypatch.setitem(BANDWIDTH_RULES, "narrow", lambda x: 1e-3)
    ys = np.concatenate([np.zeros(20), np.ones(20)])
    with pytest.raises(ValueError, match="density"):
        quantile_focus(0.5, bandwidth_rule="narrow").phi(ys, 0.5)


def test_cdf_focus_influence_mean_zero():
    ys = poisson_sample(7)
    f = cdf_focus(GEOM, 1.0)
    assert abs(f.phi(ys, f.xi_hat(ys)).mean()) < 1e-12
    np.testing.assert_allclose(f.gradient(np.array([0.4])), [1.2])


def test_parse_focus():
    assert parse_focus(GEOM, "control", "cdf:1").name == "cdf:1"
    assert parse_focus(NormalModel(), "quantile:0.5").name == "quantile:0.5"
    with pytest.raises(ValueError):
        parse_focus(GEOM, "control", "histogram:0,1,2")
    with pytest.raises(ValueError):
        parse_focus(GEOM, "median")


def test_plugin_score_with_inert_plugin_matches_plain_score():
    ys = poisson_sample(8)
    focus = cdf_focus(GEOM, 1.0)
    fit0 = fit_mhl(HLProblem(GEOM, EF, CTL, 0.5, ys))
    inert = Plugin(h=lambda y, P: (y - P[0])[:, None], P_hat=np.array([ys.mean()]))
    fit = fit_mhl(HLProblem(GEOM, EF, CTL, 0.5, ys, plugin=inert))
    plain = hfic_score(fit0, sandwich(fit0), focus)
    plug = hfic_plugin_score(fit, stacked_sandwich(fit), focus)
    assert plug.tau_hat == pytest.approx(plain.tau_hat, rel=1e-5)
    assert plug.kappa_hat == pytest.approx(plain.kappa_hat, rel=1e-5)
    assert plug.score == pytest.approx(plain.score, rel=1e-5)


def test_plugin_score_variance_focus():
    ys = philox(9).normal(0.0, 2.0, size=400)
    pl = Plugin(h=lambda y, P: (y - P[0])[:, None], P_hat=np.array([ys.mean()]))
    fit = fit_mhl(HLProblem(None, plugin_variance_ef(), identity_control(1), 1.0, ys, plugin=pl),
                  init=np.array([1.0]))
    focus = FocusSpec(g=lambda th: th[0], grad_g=lambda th: np.array([1.0]),
                      xi_hat=lambda y: float(np.var(y)),
                      phi=lambda y, xi: (y - y.mean()) ** 2 - xi, name="variance")
    rec = hfic_plugin_score(fit, stacked_sandwich(fit), focus)
    assert math.isfinite(rec.score) and rec.score > 0
    # the estimator equals the focus estimate: no bias and variance 2 sigma^4 / n
    assert rec.b_hat == pytest.approx(0.0, abs=1e-6)
    assert rec.score == pytest.approx(2 * 16 / 400, rel=0.3)
