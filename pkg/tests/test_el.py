import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from hybridlik.el import (ConstraintError, Status, el_weights, log_el, neg2_log_el,
                          solve_lambda)


def brute_force_log_el(M):
    """Maximize sum log(n w_i) over the simplex subject to sum w_i M_i = 0."""
    M = np.atleast_2d(np.asarray(M, dtype=float).T).T
    n = len(M)
    cons = [{"type": "eq", "fun": lambda w: w.sum() - 1.0},
            {"type": "eq", "fun": lambda w: w @ M}]
    res = minimize(lambda w: -np.sum(np.log(n * w)), np.full(n, 1.0 / n), method="SLSQP",
                   bounds=[(1e-12, 1.0)] * n, constraints=cons,
                   options={"ftol": 1e-14, "maxiter": 500})
    return -res.fun, res.x


def test_two_point_closed_form():
    sol = solve_lambda([[-1.0], [2.0]])
    assert sol.status is Status.CONVERGED
    assert sol.lam[0] == pytest.approx(0.25, abs=1e-10)
    np.testing.assert_allclose(sol.weights, [2 / 3, 1 / 3], atol=1e-10)
    assert sol.log_el == pytest.approx(-math.log(9 / 8), abs=1e-10)
    assert neg2_log_el([[-1.0], [2.0]]) == pytest.approx(0.235566, abs=1e-6)


def test_two_point_matches_brute_force():
    val, w = brute_force_log_el([[-1.0], [2.0]])
    assert val == pytest.approx(log_el([[-1.0], [2.0]]), abs=1e-7)
    np.testing.assert_allclose(w, [2 / 3, 1 / 3], atol=1e-6)


def test_centered_residuals_give_zero():
    y = np.array([0.3, 1.7, -0.4, 2.2, 0.9])
    sol = solve_lambda((y - y.mean())[:, None])
    assert sol.log_el == 0.0
    np.testing.assert_allclose(sol.lam, 0.0, atol=1e-12)
    np.testing.assert_allclose(sol.weights, 1 / 5, atol=1e-12)


def test_all_positive_is_infeasible():
    sol = solve_lambda([[1.0], [2.0], [3.0]])
    assert sol.status is Status.INFEASIBLE
    assert sol.log_el == -math.inf
    assert log_el([[1.0], [2.0], [3.0]]) == -math.inf


def test_zero_on_hull_boundary_is_infeasible():
    sol = solve_lambda([[0.0], [1.0], [2.0]])
    assert sol.status is Status.INFEASIBLE


def test_bivariate_infeasible_outside_hull():
    M = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 0.5]])
    assert solve_lambda(M).status is Status.INFEASIBLE


def test_weights_helper():
    np.testing.assert_allclose(el_weights([[-1.0], [0.0], [1.0]], [0.0]), 1 / 3)
    np.testing.assert_allclose(el_weights([[-1.0], [2.0]], [0.25]), [2 / 3, 1 / 3])
    with pytest.raises(ValueError):
        el_weights([[-1.0], [2.0]], [1.0])


def test_rank_deficient_constraints_rejected():
    x = np.array([-1.0, 0.5, 2.0, -0.7])
    with pytest.raises(ConstraintError):
        solve_lambda(np.column_stack([x, 2 * x]))


def test_nonfinite_rejected():
    with pytest.raises(ConstraintError):
        solve_lambda([[np.nan], [1.0]])


def test_fewer_rows_than_columns_rejected():
    with pytest.raises(ConstraintError):
        solve_lambda([[1.0, -1.0]])


def test_bivariate_matches_brute_force(rng):
    M = rng.normal(size=(15, 2)) + np.array([0.2, -0.1])
    sol = solve_lambda(M)
    assert sol.converged
    val, w = brute_force_log_el(M)
    assert sol.log_el == pytest.approx(val, abs=1e-6)
    np.testing.assert_allclose(sol.weights, w, atol=1e-4)


finite = st.floats(min_value=-10, max_value=10, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(st.lists(finite, min_size=3, max_size=30), st.floats(min_value=0.1, max_value=50))
def test_weight_identity_and_scale_equivariance(values, c):
    x = np.array(values)
    if np.ptp(x) < 1e-3:
        return
    M = (x - np.median(x))[:, None]
    sol = solve_lambda(M)
    if not sol.converged:
        assert sol.log_el == -math.inf
        return
    w = sol.weights
    assert abs(w.sum() - 1.0) <= 1e-10
    assert abs(w @ M[:, 0]) <= 1e-8 * max(1.0, np.abs(M).max())
    assert np.all(1.0 + M @ sol.lam > 0)
    assert sol.log_el <= 0.0
    for factor in (c, -c):
        scaled = solve_lambda(M * factor)
        assert scaled.converged
        np.testing.assert_allclose(scaled.lam, sol.lam / factor, rtol=1e-7, atol=1e-12)
        assert scaled.log_el == pytest.approx(sol.log_el, abs=1e-9)


def test_weighted_version_matches_replicated_rows():
    M = np.array([[-1.0], [2.0], [0.5]])
    counts = np.array([3, 1, 2])
    weighted = solve_lambda(M, weights=counts / counts.sum())
    replicated = solve_lambda(np.repeat(M, counts, axis=0))
    np.testing.assert_allclose(weighted.lam, replicated.lam, atol=1e-10)


def test_warm_start_does_not_change_answer(rng):
    M = rng.normal(size=(40, 2)) + 0.3
    cold = solve_lambda(M)
    warm = solve_lambda(M, lam0=cold.lam * 1.5)
    np.testing.assert_allclose(warm.lam, cold.lam, atol=1e-9)


def test_two_point_runtime():
    M = np.array([[-1.0], [2.0]])
    solve_lambda(M)
    t = time.perf_counter()
    for _ in range(100):
        solve_lambda(M)
    assert (time.perf_counter() - t) / 100 < 1e-3
