import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from conical_flow import flow
from conical_flow.errors import IncompleteRunError, StiffnessError
from conical_flow.flow import (
    FlowProblem, SolverConfig, advance, alpha_eps, constant_correction, flow_rhs,
    flow_rhs_eps_form, initial_constant, initial_state, integrate_flow,
    normalize_trajectory, shift_trajectory, solve_twisted_ke, step,
)
from conical_flow.geometry import REFERENCE, RadialGrid, resolved_mask
from conical_flow.monitors import twisted_scalar_weighted
from conical_flow.regularization import (
    RegularizationParams, chi_eval, chi_field, chi_t, chi_tt, omega_eps_density,
    ricci_potential_eps,
)
from conical_flow.verification import oscillating_state, rk4_local_order


@pytest.fixture(scope="module")
def small_problem(small_grid):
    return FlowProblem(RegularizationParams(0.5, 0.1, 0.5), REFERENCE, small_grid)


@pytest.fixture(scope="module")
def small_ke(small_problem):
    return solve_twisted_ke(small_problem)


# ------------------------------------------------------------ right side

def test_rhs_vanishes_at_stationary_point(small_ke):
    assert np.max(np.abs(flow_rhs(small_ke).values)) <= 1e-9


def test_rhs_at_reference_metric(small_grid):
    # phi = 0 and k = 0: only the twisting log term survives
    params = RegularizationParams(0.5, 0.1, 0.0)
    pr = FlowProblem(params, REFERENCE, small_grid)
    state = pr.state(0.0, 0.0, np.zeros(small_grid.n_points - 1))
    # psi'' equals omega_eps, not u0'', so the log ratio does not vanish
    rho = small_grid.nodes
    expected = (np.log(pr.omega_eps / REFERENCE.u0_d2(rho)) + REFERENCE.F0
                + 0.5 * np.log(0.01 + REFERENCE.s_norm_sq(rho)))
    np.testing.assert_allclose(flow_rhs(state).values, expected, rtol=0, atol=1e-13)


def test_rhs_at_reference_with_omega_zero(small_grid):
    # remove the omega_eps correction by hand: psi'' = u0'' gives the bare log term
    params = RegularizationParams(0.5, 0.1, 0.0)
    pr = FlowProblem(params, REFERENCE, small_grid)
    pr.omega_eps = REFERENCE.u0_d2(small_grid.nodes)
    state = pr.state(0.0, 0.0, np.zeros(small_grid.n_points - 1))
    rho = small_grid.nodes
    expected = REFERENCE.F0 + 0.5 * np.log(0.01 + REFERENCE.s_norm_sq(rho))
    np.testing.assert_allclose(flow_rhs(state).values, expected, rtol=0, atol=1e-13)


@pytest.mark.parametrize("eps", [1e-1, 1e-2, 1e-3])
def test_two_forms_of_rhs_agree(eps, small_grid, rng):
    pr = FlowProblem(RegularizationParams(0.5, eps, 0.5), REFERENCE, small_grid)
    base = initial_state(pr)
    state = oscillating_state(pr, base, amplitude=0.2)
    a = flow_rhs(state).values
    b = flow_rhs_eps_form(state).values
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)


def test_rhs_rate_matches_node_differences(small_problem, small_ke):
    state = oscillating_state(small_problem, small_ke, amplitude=0.2)
    np.testing.assert_allclose(state.rate, np.diff(flow_rhs(state).values), atol=1e-11)
    assert state.anchor_rate == pytest.approx(flow_rhs(state).values[0], abs=1e-12)


# ------------------------------------------------------------ stepping

@pytest.mark.parametrize("scheme", flow.SCHEMES)
def test_stationary_point_is_fixed_by_every_scheme(scheme, small_problem, small_ke):
    tau = flow.cfl_step(small_ke, 0.5) if scheme == "explicit-rk4" else 1e-2
    moved = advance(small_ke, tau, scheme)
    assert np.max(np.abs(moved.phi_total.values - small_ke.phi_total.values)) <= 1e-10


@pytest.mark.parametrize("scheme", flow.SCHEMES)
def test_constant_shift_is_carried_exactly(scheme, small_problem, small_ke):
    # phi + c solves the flow with phi + c e^(beta t)
    state = oscillating_state(small_problem, small_ke, amplitude=0.2)
    c = 0.37
    tau = flow.cfl_step(state, 0.5) if scheme == "explicit-rk4" else 1e-2
    a = advance(state, tau, scheme)
    b = advance(state.shifted(c), tau, scheme)
    diff = b.phi_total.values - a.phi_total.values
    np.testing.assert_allclose(diff, c * np.exp(0.5 * tau), rtol=0, atol=1e-8)


def test_explicit_scheme_is_fourth_order(small_problem, small_ke):
    orders = rk4_local_order(small_problem, oscillating_state(small_problem, small_ke))
    assert min(orders) >= 4.0


def test_ros2_is_second_order(small_problem, small_ke):
    state = oscillating_state(small_problem, small_ke, amplitude=0.2)
    ref = state
    for _ in range(2048):
        ref = advance(ref, 0.2 / 2048, "ros2")
    errs = []
    # the stiff first node costs a little order at coarse steps
    for n in (16, 32, 64):
        s = state
        for _ in range(n):
            s = advance(s, 0.2 / n, "ros2")
        errs.append(np.max(np.abs(s.phi_total.values - ref.phi_total.values)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders > 1.6)


def test_oversized_explicit_step_is_halved(small_problem, small_ke):
    state = oscillating_state(small_problem, small_ke, amplitude=0.2)
    cfg = SolverConfig(scheme="explicit-rk4")
    moved = step(state, cfg, dt=10.0)
    assert moved.t - state.t < 10.0
    assert np.all(moved.density > 0)


def test_stiffness_error_carries_diagnostics(small_problem, small_ke, monkeypatch):
    def always_fail(state, tau, scheme):
        raise flow.DegenerateMetricError("forced")

    monkeypatch.setattr(flow, "_try_step", always_fail)
    with pytest.raises(StiffnessError) as info:
        step(small_ke, SolverConfig(), dt=1e-2)
    diag = info.value.diagnostics
    assert diag["dt"] < flow.DT_FLOOR
    assert diag["scheme"] == "ros2"
    assert diag["min_density"] > 0


def test_max_steps_is_enforced(small_problem):
    with pytest.raises(StiffnessError):
        integrate_flow(small_problem, SolverConfig(t_end=1.0, max_steps=3))


# ------------------------------------------------------------ solver config

@pytest.mark.parametrize("kwargs", [
    {"dt_safety": 0.0}, {"dt_safety": 1.5}, {"t_end": 0.0}, {"scheme": "euler"},
    {"dt_initial": 0.0}, {"dt_initial": 1.0, "dt_max": 0.5}, {"dt_growth": 0.9},
    {"snapshot_times": (-1.0,)},
])
def test_solver_config_rejects(kwargs):
    with pytest.raises(ValueError):
        SolverConfig(**kwargs)


def test_snapshot_times_include_endpoints():
    times = SolverConfig(t_end=2.0, snapshot_times=(0.5, 1.0)).all_snapshot_times()
    assert times[0] == 0.0 and times[-1] == 2.0
    assert list(times) == sorted(set(times))
    assert 0.5 in times and 1.0 in times


def test_trajectory_lands_on_snapshot_times(small_problem):
    cfg = SolverConfig(t_end=1.0, snapshot_times=(0.3, 0.7))
    traj = integrate_flow(small_problem, cfg)
    assert [s.t for s in traj.snapshots] == list(cfg.all_snapshot_times())
    assert traj.step_times[-1] == 1.0
    assert np.all(np.diff(traj.step_times) > 0)


# ------------------------------------------------------------ initial constant

def _initial_constant_quad(beta, eps, k, geom):
    """Independent quadrature of -(1/(beta V)) int (F_eps + k beta chi) dV_eps."""

    def integrand(rho):
        s = geom.s_norm_sq(rho)
        s1, s2 = geom.s_norm_sq_d1(rho), geom.s_norm_sq_d2(rho)
        dens = geom.u0_d2(rho) + k * (chi_tt(beta, eps, s) * s1 * s1 + chi_t(beta, eps, s) * s2)
        f_eps = np.log(dens / geom.u0_d2(rho)) + (1 - beta) * np.log(eps ** 2 + s)
        return (f_eps + k * beta * chi_eval(beta, eps, float(s))) * dens

    knee = 2.0 * np.log(1.0 / eps)
    val, _ = integrate.quad(integrand, -30, 30, points=[-knee, 0.0, knee], limit=400,
                            epsabs=1e-13)
    return -2.0 * np.pi * val / (beta * geom.total_volume)


@pytest.mark.parametrize("eps", [1e-1, 1e-2])
def test_initial_constant_matches_quadrature(eps, desk_grid):
    params = RegularizationParams(0.5, eps, 0.5)
    ours = initial_constant(params, REFERENCE, desk_grid)
    assert ours == pytest.approx(_initial_constant_quad(0.5, eps, 0.5, REFERENCE), abs=1e-8)


def test_initial_constant_spread_is_bounded(ctx):
    consts = [initial_constant(ctx.params(e), ctx.geom, ctx.grid) for e in ctx.schedule]
    bound = 0.0
    for e in ctx.schedule:
        p = ctx.params(e)
        f = ricci_potential_eps(p, ctx.geom, ctx.grid).values
        chi = chi_field(p.beta, e, ctx.grid).values
        bound = max(bound, np.max(np.abs(f)) + p.k * p.beta * np.max(chi))
    assert max(consts) - min(consts) <= 2.0 * bound / ctx.beta


# ------------------------------------------------------------ normalization

def test_stationary_start_needs_no_correction(small_problem, small_ke):
    traj = integrate_flow(small_problem, SolverConfig(t_end=2.0), start=small_ke)
    assert abs(constant_correction(traj, 0.5)) <= 1e-10
    assert abs(constant_correction(traj, 0.5, "quadrature")) <= 1e-10


def test_rerun_from_corrected_constant(small_problem):
    cfg = SolverConfig(t_end=10.0, snapshot_times=(1.0,))
    traj = integrate_flow(small_problem, cfg)
    normed, delta = normalize_trajectory(traj, 0.5)
    c0 = initial_constant(small_problem.params, small_problem.geom, small_problem.grid)
    rerun = integrate_flow(small_problem, cfg, start=initial_state(small_problem, c0 + delta))
    a = [s for s in normed.snapshots if s.t == 1.0][0]
    b = [s for s in rerun.snapshots if s.t == 1.0][0]
    assert np.max(np.abs(a.phi_total.values - b.phi_total.values)) <= 1e-6


def test_endpoint_and_quadrature_corrections_agree(small_problem):
    traj = integrate_flow(small_problem, SolverConfig(t_end=10.0))
    a = constant_correction(traj, 0.5)
    b = constant_correction(traj, 0.5, "quadrature")
    assert a == pytest.approx(b, abs=5e-3 * max(1.0, abs(a)))


def test_normalized_trajectory_settles(small_problem):
    traj = integrate_flow(small_problem, SolverConfig(t_end=10.0))
    normed, _ = normalize_trajectory(traj, 0.5)
    assert abs(alpha_eps(normed.snapshots[-1])) <= 1e-10


def test_shift_trajectory_moves_every_snapshot(small_problem):
    traj = integrate_flow(small_problem, SolverConfig(t_end=1.0, snapshot_times=(0.5,)))
    moved = shift_trajectory(traj, 0.1)
    for s, m in zip(traj.snapshots, moved.snapshots):
        np.testing.assert_allclose(m.phi_total.values - s.phi_total.values,
                                   0.1 * np.exp(0.5 * s.t), atol=1e-13)


def test_quadrature_needs_gradient_series(small_problem, small_ke):
    traj = flow.Trajectory([small_ke], np.array([0.0]), np.array([0.0]))
    with pytest.raises(IncompleteRunError):
        normalize_trajectory(traj, 0.5, "quadrature")
    with pytest.raises(IncompleteRunError):
        normalize_trajectory(flow.Trajectory([], np.array([]), np.array([])), 0.5)


def test_unknown_correction_method(small_problem, small_ke):
    traj = flow.Trajectory([small_ke], np.array([0.0]), np.array([0.0]))
    with pytest.raises(ValueError):
        constant_correction(traj, 0.5, "midpoint")


# ------------------------------------------------------------ stationary solve

def test_stationary_metric_has_constant_twisted_curvature(desk_grid):
    pr = FlowProblem(RegularizationParams(0.5, 1e-2, 0.5), REFERENCE, desk_grid)
    ke = solve_twisted_ke(pr)
    ratio = twisted_scalar_weighted(ke) / ke.density
    mask = resolved_mask(ke.psi_dd)
    assert np.max(np.abs(ratio[mask] - 0.5)) <= 1e-4


def test_long_run_converges_to_stationary_metric(ctx):
    run = ctx.long_run
    ke = solve_twisted_ke(FlowProblem(ctx.params(ctx.schedule[-1]), ctx.geom, ctx.grid))
    assert np.max(np.abs(run.snapshots[-1].density - ke.density)) <= 1e-5


def test_huge_epsilon_gives_constant_potential(small_grid):
    # eps -> infinity with k = 0: the twist is the constant (1 - beta) log eps^2
    eps = 1e6
    ke = solve_twisted_ke(RegularizationParams(0.5, eps, 0.0), REFERENCE, small_grid)
    expected = -0.5 * np.log(eps ** 2) / 0.5
    phi = ke.phi_total.values
    assert np.ptp(phi) <= 1e-9
    assert phi.mean() == pytest.approx(expected, abs=1e-9)


# ------------------------------------------------------------ invariants along the flow

def test_maximum_principle_for_phi_dot(ctx):
    # e^(-beta t) phi_dot solves the heat equation for the evolving metric
    for run in ctx.runs:
        highs, lows = [], []
        for s in run.snapshots:
            w = np.exp(-ctx.beta * s.t) * s.phi_dot.values
            highs.append(w.max())
            lows.append(w.min())
        assert np.all(np.diff(highs) <= 1e-9)
        assert np.all(np.diff(lows) >= -1e-9)


def test_phi_dot_bound_after_unit_time(ctx):
    for run in ctx.runs:
        late = [np.max(np.abs(s.phi_dot.values)) for s in run.snapshots if s.t >= 1.0]
        window = [np.max(np.abs(s.phi_dot.values)) for s in run.snapshots if 1.0 <= s.t <= 2.0]
        assert max(late) <= 1.1 * max(window)


def test_volume_is_conserved_along_the_flow(ctx):
    for run in ctx.runs:
        vols = [2.0 * np.pi * np.dot(ctx.grid.trapezoid_weights, s.density)
                for s in run.snapshots]
        np.testing.assert_allclose(vols, vols[0], rtol=1e-12)


def test_schemes_agree_on_a_short_run(small_problem):
    # the explicit scheme is CFL bound; compare the two implicit ones instead
    a = integrate_flow(small_problem, SolverConfig(t_end=0.5, dt_max=1e-3)).snapshots[-1]
    b = integrate_flow(small_problem, SolverConfig(t_end=0.5, scheme="imex", dt_max=1e-4,
                                                   max_steps=10 ** 5)).snapshots[-1]
    assert np.max(np.abs(a.phi_total.values - b.phi_total.values)) <= 1e-3


@settings(max_examples=15, deadline=None)
@given(c=st.floats(-5, 5), amp=st.floats(0.0, 0.3))
def test_increments_do_not_see_the_anchor(c, amp, small_problem, small_ke):
    state = oscillating_state(small_problem, small_ke, amplitude=amp)
    np.testing.assert_array_equal(state.shifted(c).rate, state.rate)
