import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate as spi

from conical_flow.errors import (ConfigurationError, DegenerateMetricError, DomainError)
from conical_flow.geometry import REFERENCE, RadialField, RadialGrid, second_derivative
from conical_flow.limit import DEFAULT_SCHEDULE
from conical_flow.regularization import (RegularizationParams, barrier_normalization_report,
                                         chi_eval, chi_field, chi_rho_identity_residual, chi_t,
                                         chi_tt, chi_values, conical_density, cone_chart_bounds,
                                         cone_chart_coefficient, omega_eps_density, select_k,
                                         theta_eps_density)
from conical_flow.verification import cone_chart_sample


def _mp_chi(beta, eps, t):
    b, e2 = mpmath.mpf(beta), mpmath.mpf(eps) ** 2
    f = lambda r: ((e2 + r) ** b - e2 ** b) / r if r != 0 else b * e2 ** (b - 1)
    return float(mpmath.quad(f, [0, min(t, float(e2)), t]) / b)


# ---------------------------------------------------------------- params

@pytest.mark.parametrize("kwargs", [dict(beta=0.0, epsilon=0.1, k=0.1),
                                    dict(beta=1.0, epsilon=0.1, k=0.1),
                                    dict(beta=0.5, epsilon=-1e-3, k=0.1),
                                    dict(beta=0.5, epsilon=0.1, k=-0.1),
                                    dict(beta=0.5, epsilon=0.1, k=0.1, gamma_target=1.0)])
def test_params_validation(kwargs):
    with pytest.raises(DomainError):
        RegularizationParams(**kwargs)


# ---------------------------------------------------------------- chi

def test_chi_at_zero():
    for beta, eps in ((0.3, 0.1), (0.5, 1e-3), (0.9, 0.0)):
        assert chi_eval(beta, eps, 0.0) == 0.0


def test_chi_conical_closed_form():
    # (1/beta) int_0^t r^(beta-1) dr = t^beta/beta^2; quadrature with the algebraic weight
    beta, t = 0.5, 0.25
    oracle, _ = spi.quad(lambda r: 1.0 / beta, 0.0, t, weight="alg", wvar=(beta - 1.0, 0.0))
    assert oracle == pytest.approx(2.0, abs=1e-10)
    assert chi_eval(beta, 0.0, t) == pytest.approx(oracle, abs=1e-8)
    # the eps > 0 quadrature approaches the same value
    assert chi_eval(beta, 1e-7, t) == pytest.approx(2.0, abs=1e-5)


@pytest.mark.parametrize("beta,eps,t", [(0.5, 0.1, 0.2), (0.3, 1e-2, 0.25), (0.7, 1e-3, 0.05),
                                        (0.5, 0.3, 1e-6)])
def test_chi_matches_high_precision_quadrature(beta, eps, t):
    assert chi_eval(beta, eps, t) == pytest.approx(_mp_chi(beta, eps, t), rel=1e-10, abs=1e-13)


def test_chi_rejects_negative_argument():
    with pytest.raises(DomainError):
        chi_eval(0.5, 0.1, -1e-3)
    with pytest.raises(DomainError):
        chi_eval(1.2, 0.1, 0.1)


@settings(max_examples=40, deadline=None)
@given(beta=st.floats(0.05, 0.95), eps=st.floats(1e-4, 1.0),
       t1=st.floats(0.0, 0.25), dt=st.floats(1e-6, 0.25))
def test_chi_strictly_increasing(beta, eps, t1, dt):
    assert chi_eval(beta, eps, t1 + dt) > chi_eval(beta, eps, t1)


@pytest.mark.parametrize("beta,eps", [(0.5, 0.1), (0.3, 1e-3), (0.8, 1e-2)])
def test_chi_derivatives_match_high_precision(beta, eps):
    # d chi/dt is the integrand over beta; its t-derivative by mpmath differentiation
    mpmath.mp.dps = 40
    b, e2 = mpmath.mpf(beta), mpmath.mpf(eps) ** 2
    first = lambda t: ((e2 + t) ** b - e2 ** b) / (b * t)
    sigma = [1e-8, 1e-4, 1e-2, 0.1, 0.24]
    exact_t = np.array([float(first(mpmath.mpf(x))) for x in sigma])
    exact_tt = np.array([float(mpmath.diff(first, mpmath.mpf(x))) for x in sigma])
    assert np.allclose(chi_t(beta, eps, np.array(sigma)), exact_t, rtol=1e-12)
    assert np.allclose(chi_tt(beta, eps, np.array(sigma)), exact_tt, rtol=1e-9)


def test_chi_field_matches_pointwise(small_grid):
    beta, eps = 0.5, 1e-2
    nodes = chi_field(beta, eps, small_grid).values
    direct = chi_values(beta, eps, REFERENCE.s_norm_sq(small_grid.nodes))
    assert np.allclose(nodes, direct, rtol=1e-11, atol=1e-14)


def test_chi_uniformly_bounded_on_schedule():
    # max over (eps, t) samples stays below 1.05 x the eps = 0 closed-form max
    for beta in (0.3, 0.5, 0.7):
        bound = chi_eval(beta, 0.0, 0.25)
        ts = np.linspace(0.0, 0.25, 26)
        top = max(chi_eval(beta, e, t) for e in DEFAULT_SCHEDULE for t in ts)
        assert 0.0 <= top <= 1.05 * bound


# ---------------------------------------------------------------- omega_eps

def test_omega_eps_with_zero_k(desk_grid):
    p = RegularizationParams(0.5, 1e-2, 0.0)
    assert np.array_equal(omega_eps_density(p, REFERENCE, desk_grid).values,
                          REFERENCE.u0_d2(desk_grid.nodes))


def test_omega_eps_chain_rule_matches_differencing(desk_grid):
    # analytic second derivative of chi against second differences of the tabulated chi
    p = RegularizationParams(0.5, 0.1, 0.4)
    dens = omega_eps_density(p, REFERENCE, desk_grid).values
    num = REFERENCE.u0_d2(desk_grid.nodes) + p.k * second_derivative(
        chi_field(0.5, 0.1, desk_grid), order=4).values
    w = desk_grid.window(15.0)
    assert np.max(np.abs(dens - num)[w]) < 1e-7


def test_omega_eps_lower_bound_over_schedule(desk_grid):
    k = select_k(REFERENCE, desk_grid, 0.5, DEFAULT_SCHEDULE, 0.5)
    assert k > 0.0
    u0dd = REFERENCE.u0_d2(desk_grid.nodes)
    for eps in DEFAULT_SCHEDULE:
        dens = omega_eps_density(RegularizationParams(0.5, eps, k), REFERENCE, desk_grid).values
        assert np.min(dens / u0dd) >= 0.5


def test_omega_eps_approaches_conical_limit(desk_grid):
    k = 0.5
    i = desk_grid.n_points // 2
    limit = conical_density(0.5, k, desk_grid).values
    gaps = [abs(omega_eps_density(RegularizationParams(0.5, e, k), REFERENCE, desk_grid).values[i]
                - limit[i]) for e in (1e-1, 1e-2, 1e-3, 1e-4)]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-4


def test_omega_eps_successive_differences_decrease(desk_grid):
    w = desk_grid.window(5.0)
    dens = [omega_eps_density(RegularizationParams(0.5, e, 0.5), REFERENCE, desk_grid).values[w]
            for e in DEFAULT_SCHEDULE]
    diffs = [np.max(np.abs(a - b)) for a, b in zip(dens, dens[1:])]
    assert all(b < a for a, b in zip(diffs, diffs[1:]))


def test_omega_eps_rejects_large_k(desk_grid):
    with pytest.raises(DegenerateMetricError):
        omega_eps_density(RegularizationParams(0.5, 1e-3, 50.0), REFERENCE, desk_grid)


# ---------------------------------------------------------------- select_k

def test_select_k_near_one_gamma(desk_grid):
    try:
        k = select_k(REFERENCE, desk_grid, 0.5, [1e-1, 1e-2], 1.0 - 1e-12)
    except ConfigurationError:
        return
    assert k <= 1e-3


def test_select_k_verified_and_nearly_maximal(desk_grid):
    sched = [1e-1, 1e-2, 1e-3]
    k = select_k(REFERENCE, desk_grid, 0.5, sched, 0.5)
    u0dd = REFERENCE.u0_d2(desk_grid.nodes)

    def worst(kk):
        return min(np.min(omega_eps_density(RegularizationParams(0.5, e, kk), REFERENCE, desk_grid,
                                            check=False).values / u0dd) for e in sched)

    assert worst(k) >= 0.5
    assert worst(k + 2e-3) < 0.5


def test_select_k_monotone_in_gamma(desk_grid):
    ks = [select_k(REFERENCE, desk_grid, 0.5, [1e-1, 1e-2, 1e-3], g) for g in (0.3, 0.5, 0.7, 0.9)]
    assert all(b <= a for a, b in zip(ks, ks[1:]))


def test_select_k_empty_schedule(desk_grid):
    with pytest.raises(ConfigurationError):
        select_k(REFERENCE, desk_grid, 0.5, [], 0.5)


# ---------------------------------------------------------------- theta_eps

def test_theta_large_eps_limit(desk_grid):
    p = RegularizationParams(0.5, 1e6, 0.1)
    theta = theta_eps_density(p, REFERENCE, desk_grid).values
    assert np.max(np.abs(theta - 0.5 * REFERENCE.u0_d2(desk_grid.nodes))) <= 1e-6


def test_theta_vanishes_off_divisor_at_eps_zero(desk_grid):
    p = RegularizationParams(0.5, 0.0, 0.1)
    assert np.max(np.abs(theta_eps_density(p, REFERENCE, desk_grid).values)) <= 1e-8


def test_theta_semipositive(desk_grid):
    p = RegularizationParams(0.3, 1e-2, 0.1)
    assert np.min(theta_eps_density(p, REFERENCE, desk_grid).values) >= -1e-10


def test_theta_matches_differenced_definition(desk_grid):
    # (1-beta)(u0'' + (log(eps^2 + |s|^2))'') by finite differences
    p = RegularizationParams(0.4, 0.05, 0.1)
    logs = RadialField(desk_grid, np.log(p.epsilon ** 2 + REFERENCE.s_norm_sq(desk_grid.nodes)))
    num = (1 - p.beta) * (REFERENCE.u0_d2(desk_grid.nodes) + second_derivative(logs, order=4).values)
    theta = theta_eps_density(p, REFERENCE, desk_grid).values
    assert np.max(np.abs(theta - num)[2:-2]) < 1e-6


@settings(max_examples=30, deadline=None)
@given(beta=st.floats(0.05, 0.95), eps=st.floats(1e-6, 10.0))
def test_theta_semipositive_property(beta, eps):
    g = RadialGrid(30.0, 256)
    theta = theta_eps_density(RegularizationParams(beta, eps, 0.1), REFERENCE, g).values
    assert np.min(theta) >= -1e-10


# ---------------------------------------------------------------- barrier identity

def test_barrier_identity_residual_small(desk_grid):
    assert chi_rho_identity_residual(0.3, 1e-2, REFERENCE, desk_grid) <= 1e-4


def test_barrier_identity_second_order():
    res = [chi_rho_identity_residual(0.3, 1e-2, REFERENCE, RadialGrid(30.0, n))
           for n in (513, 1025, 2049)]
    assert all(a / b >= 3.5 for a, b in zip(res, res[1:]))


def test_barrier_identity_flat_limit(desk_grid):
    assert chi_rho_identity_residual(0.3, 1e4, REFERENCE, desk_grid) <= 1e-8


def test_barrier_normalization_report(desk_grid):
    rep = barrier_normalization_report(0.3, 1e-2, 0.5, REFERENCE, desk_grid)
    assert rep["matches"] == "derived"
    assert rep["as_printed"] > 100 * rep["derived"]


def test_barrier_exponent_domain(desk_grid):
    with pytest.raises(DomainError):
        chi_rho_identity_residual(1.0, 1e-2, REFERENCE, desk_grid)


# ---------------------------------------------------------------- cone chart coefficient

def test_cone_chart_origin_is_one():
    for beta in (0.3, 0.5, 0.7):
        for eps in (1.0, 1e-2, 1e-6):
            assert cone_chart_coefficient(beta, eps, 0.0, 0.0) == 1.0


def test_cone_chart_matches_defining_expression():
    beta, eps, r, phi = 0.3, 0.05, np.array([0.0, 1e-3, 0.7, 5.0]), 0.4
    p = 1.0 / beta - 1.0
    base = eps ** (2 * beta) + r * r
    direct = (eps ** 2 + base ** p * r * r * np.exp(-phi)) ** (beta - 1) * base ** p
    assert np.allclose(cone_chart_coefficient(beta, eps, r, phi), direct, rtol=1e-12)


def test_cone_chart_bound_constants():
    # the two bounds displayed in the estimate, for |phi| <= c
    lower, upper = cone_chart_bounds(0.5, 1.0)
    assert lower == pytest.approx((1 + np.e) ** -0.5)
    assert upper == pytest.approx(2 ** 0.5 * np.exp(0.5))


@pytest.mark.parametrize("beta", [0.3, 0.5, 0.7])
def test_cone_chart_bounds_on_sample_grid(beta):
    violations, closest = cone_chart_sample(beta, c=1.0, n=100)
    assert violations == 0
    assert closest > 0.0


@settings(max_examples=60, deadline=None)
@given(beta=st.floats(0.05, 0.95), eps=st.floats(0.0, 1.0), r=st.floats(0.0, 100.0),
       c=st.floats(0.0, 3.0), frac=st.floats(-1.0, 1.0))
def test_cone_chart_bounds_property(beta, eps, r, c, frac):
    lower, upper = cone_chart_bounds(beta, c)
    val = cone_chart_coefficient(beta, eps, r, frac * c)
    assert lower * (1 - 1e-12) <= val <= upper * (1 + 1e-12)


def test_cone_chart_domain():
    with pytest.raises(DomainError):
        cone_chart_coefficient(1.0, 0.1, 0.5, 0.0)
    with pytest.raises(DomainError):
        cone_chart_coefficient(0.5, 0.1, -0.5, 0.0)
