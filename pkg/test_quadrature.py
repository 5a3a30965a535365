#!/usr/bin/env python3
"""
Tests for the nested Gauss-Hermite expectations
"""

import itertools

import numpy as np
import pytest

from mismatched_regression.errors import DomainError, EvaluationError
from mismatched_regression.potential import Potential
from mismatched_regression.quadrature import (
    ThetaSpec,
    inner_moments,
    make_grid,
    nested_expect,
    standard_normal_rule,
)
from mismatched_regression.replica import ModelParams, map_phi


def test_rule_is_a_probability_rule():
    rule = standard_normal_rule(20)
    assert rule.weights.sum() == pytest.approx(1.0, abs=1e-14)
    assert rule.moment(1) == pytest.approx(0.0, abs=1e-14)
    assert rule.moment(2) == pytest.approx(1.0, abs=1e-13)
    assert rule.moment(4) == pytest.approx(3.0, abs=1e-12)
    assert rule.expect(lambda x: x**6) == pytest.approx(15.0, rel=1e-12)


def test_rule_is_symmetric_and_read_only():
    rule = standard_normal_rule(31)
    np.testing.assert_array_equal(rule.nodes, -rule.nodes[::-1])
    np.testing.assert_array_equal(rule.weights, rule.weights[::-1])
    with pytest.raises(ValueError):
        rule.nodes[0] = 0.0


@pytest.mark.parametrize("n", [0, 1, 513])
def test_rule_order_bounds(n):
    with pytest.raises(DomainError):
        standard_normal_rule(n)


def test_theta_from_overlaps():
    theta = ThetaSpec.from_overlaps(1.0, 0.44, 0.53)
    assert theta.m_coeff == pytest.approx(1.2)
    assert theta.s_coeff == pytest.approx(0.3)
    with pytest.raises(DomainError):
        ThetaSpec.from_overlaps(1.0, 0.5, 0.5)
    with pytest.raises(DomainError):
        ThetaSpec.from_overlaps(1.0, -0.1, 0.5)


def test_inner_moments_quadratic_closed_form():
    # for u = -s^2/(2 delta): E1/E0 = -a/(delta+s^2), E2/E0 = a^2/(delta+s^2)^2 - 1/(delta+s^2)
    delta, s = 1.5, 0.8
    grid = make_grid(40, 60)
    theta = ThetaSpec(m_coeff=1.0, s_coeff=s)
    a = np.array([-2.0, -0.3, 0.0, 1.1, 3.0])
    moments = inner_moments(grid, theta, Potential.quadratic(delta), a)
    denom = delta + s**2
    np.testing.assert_allclose(moments.ratio1, -a / denom, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(moments.ratio2, a**2 / denom**2 - 1.0 / denom, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(
        moments.log_e0, 0.5 * np.log(delta / denom) - a**2 / (2.0 * denom), rtol=1e-10, atol=1e-12
    )


def test_inner_moments_survive_large_arguments():
    delta, s, a = 0.01, 0.5, 50.0
    grid = make_grid(20, 40)
    moments = inner_moments(grid, ThetaSpec(1.0, s), Potential.quadratic(delta), a)
    assert np.isfinite(moments.log_e0).all()
    assert np.isfinite(moments.ratio1).all()
    denom = delta + s**2
    assert moments.log_e0[0] == pytest.approx(0.5 * np.log(delta / denom) - a**2 / (2.0 * denom), rel=1e-12)
    assert moments.ratio1[0] == pytest.approx(-a / denom, rel=1e-12)


def test_narrow_inner_integrand_is_exact_at_low_order():
    # exp(u) much narrower than the xi spread: s^2/delta = 16
    delta, s = 0.25, 2.0
    a = np.linspace(-3.0, 3.0, 7)
    moments = inner_moments(make_grid(10, 4), ThetaSpec(1.0, s), Potential.quadratic(delta), a)
    denom = delta + s**2
    np.testing.assert_allclose(moments.ratio2, a**2 / denom**2 - 1.0 / denom, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(moments.log_e0, 0.5 * np.log(delta / denom) - a**2 / (2.0 * denom), rtol=1e-12)


def test_two_and_three_point_rules():
    rule = make_grid(2, 3).outer
    np.testing.assert_allclose(rule.nodes, [-1.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(rule.weights, [0.5, 0.5], atol=1e-15)
    rule = make_grid(2, 3).inner
    np.testing.assert_allclose(rule.nodes, [-np.sqrt(3.0), 0.0, np.sqrt(3.0)], atol=1e-14)
    np.testing.assert_allclose(rule.weights, [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0], atol=1e-15)


def test_five_points_integrate_degree_nine():
    rule = standard_normal_rule(5)
    # E x^k for a standard normal: 0 for odd k, (k-1)!! for even k
    expected = {0: 1.0, 1: 0.0, 2: 1.0, 3: 0.0, 4: 3.0, 5: 0.0, 6: 15.0, 7: 0.0, 8: 105.0, 9: 0.0}
    for power, value in expected.items():
        assert rule.moment(power) == pytest.approx(value, rel=1e-12, abs=1e-12), power
    assert rule.moment(10) != pytest.approx(945.0, rel=1e-6)


def test_node_doubling_differences_shrink():
    theta = ThetaSpec(1.5, 1.0)
    p = Potential.pseudo_huber(0.5)

    def value(n):
        return nested_expect(make_grid(n, n), theta, p, lambda moments: moments.log_e0)

    gaps = [abs(value(n) - value(2 * n)) for n in (10, 20, 40, 80)]
    for previous, current in zip(gaps, gaps[1:]):
        assert current <= previous or current < 1e-12


def test_zero_potential_inner_expectation_is_one():
    for theta in (ThetaSpec(0.0, 0.0), ThetaSpec(1.3, 0.7), ThetaSpec.from_overlaps(2.0, 0.1, 3.0)):
        assert nested_expect(make_grid(), theta, Potential.zero(), lambda moments: moments.e0) == pytest.approx(
            1.0, abs=1e-14
        )


def _analytic_phi(alpha, delta, delta_star, q, rho):
    d = delta + rho - q
    r = alpha * (delta_star + q) / d**2
    return r, r - alpha / d


def test_phi_matches_analytic_reduction_for_quadratic():
    params = ModelParams(alpha=2.0, delta_star=1.0, kappa=0.5, potential=Potential.quadratic(1.0))
    grid = make_grid()
    points = list(itertools.product([0.0, 0.1, 0.4, 1.0, 2.5], [0.05, 0.3, 1.0, 2.0]))
    assert len(points) == 20
    for q, gap in points:
        r, rbar = map_phi(params, q, q + gap, grid)
        r_ref, rbar_ref = _analytic_phi(2.0, 1.0, 1.0, q, q + gap)
        assert r == pytest.approx(r_ref, abs=1e-9)
        assert rbar == pytest.approx(rbar_ref, abs=1e-9)


def test_node_doubling_quadratic():
    params = ModelParams(alpha=1.5, delta_star=0.5, kappa=0.5, potential=Potential.quadratic(0.8))
    for q, gap in [(0.2, 0.3), (1.0, 1.0), (0.05, 2.0)]:
        coarse = map_phi(params, q, q + gap, make_grid(80, 80))
        fine = map_phi(params, q, q + gap, make_grid(160, 160))
        assert np.max(np.abs(np.subtract(coarse, fine))) < 1e-10


def test_node_doubling_pseudo_huber():
    params = ModelParams(alpha=2.0, delta_star=1.0, kappa=0.5, potential=Potential.pseudo_huber(1.0))
    coarse = map_phi(params, 0.3, 0.8, make_grid(80, 80))
    fine = map_phi(params, 0.3, 0.8, make_grid(160, 160))
    assert np.max(np.abs(np.subtract(coarse, fine))) < 1e-6


def test_non_finite_integrand_names_the_node():
    grid = make_grid(10, 10)

    def poisoned(moments):
        values = np.ones_like(moments.shift)
        values[3] = np.nan
        return values

    with pytest.raises(EvaluationError) as err:
        nested_expect(grid, ThetaSpec(1.0, 1.0), Potential.zero(), poisoned)
    assert err.value.node == 3
