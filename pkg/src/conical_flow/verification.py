"""Acceptance criteria as executable checks shared by ``verify`` and the test-suite.

Each criterion returns a :class:`CriterionResult`; heavy trajectories are
computed once per :class:`VerificationContext` and reused.
"""

import filecmp
import os
import tempfile
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .flow import (FlowProblem, SolverConfig, advance, cfl_step, integrate_flow, initial_state,
                   solve_twisted_ke, step)
from .functionals import coupled_w_evolve, w_constraint, w_functional
from .geometry import REFERENCE, RadialField, RadialGrid, meridian_diameter, scalar_curvature
from .limit import (DEFAULT_SCHEDULE, SweepSettings, football_offset, ke_comparison_details,
                    load_run, persist_run, run_epsilon, run_sweep)
from .monitors import holder_fit, poincare_eigenvalue
from .regularization import (RegularizationParams, chi_eval, chi_field, cone_chart_bounds,
                             cone_chart_coefficient, omega_eps_density, select_k,
                             theta_eps_density)

DEFAULT_THRESHOLDS = {
    "c1_curvature_tol": 1e-6, "c1_volume_tol": 1e-6, "c1_meridian_tol": 1e-4,
    "c2_gamma": 0.5,
    "c3_stationary_tol": 1e-10, "c3_min_order": 4.0, "c3_shift_tol": 1e-8,
    "c4_monotone_tol": 1e-8, "c4_derivative_rel": 1e-3,
    "c5_drift_rel": 1e-4, "c5_spread": 2.0,
    "c6_slack": 0.05,
    "c7_a_max": 1e-10, "c7_monotone_tol": 1e-6,
    "c8_slack": 0.01, "c8_reference_tol": 1e-3,
    "c9_slope": 1e-3, "c9_level_ratio": 2.0,
    "c10_final_gap": 1e-3,
    "c11_mismatch": 1e-2, "c11_y_ratio": 1e-3,
    "c12_tol": 1e-6,
    "c14_alpha_tol": 0.05, "c14_r2": 0.99,
}

CRITERIA = {
    1: "calibration",
    2: "regularization bounds",
    3: "flow correctness",
    4: "K-energy monotone",
    5: "conservation identity",
    6: "Perelman lower bound",
    7: "a_eps sign and monotonicity",
    8: "Poincare eigenvalue",
    9: "Perelman C1 plateau",
    10: "eps -> 0 convergence",
    11: "long-time conical KE convergence",
    12: "W monotonicity",
    13: "cone chart coefficient bounds",
    14: "Holder fit",
    15: "engineering",
}


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    margin: float
    detail: dict = field(default_factory=dict)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.number:2d} {self.name}: worst margin {self.margin:.3e}"


def _result(number, checks, detail):
    """``checks`` maps a label to a signed margin (>= 0 passes)."""
    margins = {k: float(v) for k, v in checks.items()}
    worst = min(margins.values())
    detail = dict(detail)
    detail["margins"] = margins
    return CriterionResult(number, CRITERIA[number], worst >= 0.0, worst, detail)


class VerificationContext:
    """Scale settings plus lazily computed shared trajectories."""

    def __init__(self, beta=0.5, rho_max=30.0, n_points=2048, schedule=DEFAULT_SCHEDULE,
                 t_sweep=10.0, t_long=50.0, thresholds=None):
        self.beta = beta
        self.grid = RadialGrid(rho_max, n_points)
        self.geom = REFERENCE
        self.schedule = tuple(schedule)
        self.t_sweep = t_sweep
        self.t_long = t_long
        self.thresholds = dict(DEFAULT_THRESHOLDS)
        if thresholds:
            unknown = set(thresholds) - set(DEFAULT_THRESHOLDS)
            if unknown:
                raise KeyError(f"unknown thresholds: {sorted(unknown)}")
            self.thresholds.update(thresholds)

    def th(self, key):
        return self.thresholds[key]

    @cached_property
    def k(self):
        return select_k(self.geom, self.grid, self.beta, self.schedule, self.th("c2_gamma"))

    def params(self, eps):
        return RegularizationParams(self.beta, eps, self.k, self.th("c2_gamma"))

    @cached_property
    def sweep(self):
        times = set(np.round(np.arange(0.0, self.t_sweep + 1e-9, 0.25), 10))
        times.update((0.99, 1.01, 1.99, 2.01))
        solver = SolverConfig(t_end=self.t_sweep, snapshot_times=tuple(sorted(times)))
        settings = SweepSettings(beta=self.beta, solver=solver, gamma_target=self.th("c2_gamma"),
                                 k=self.k)
        return run_sweep(settings, self.schedule, geom=self.geom, grid=self.grid)

    @cached_property
    def runs(self):
        return [r for r in self.sweep.runs if r is not None]

    @cached_property
    def long_run(self):
        solver = SolverConfig(t_end=self.t_long, snapshot_times=(1.0,))
        return run_epsilon(self.params(self.schedule[-1]), solver, self.geom, self.grid,
                           with_monitors=False)


# ------------------------------------------------------------ criteria

def criterion_1(ctx):
    g, geom = ctx.grid, ctx.geom
    dens = geom.density(g)
    curv = float(np.max(np.abs(scalar_curvature(dens, geom).values - 1.0)))
    vol = float(abs(2.0 * np.pi * np.dot(g.trapezoid_weights, dens.values) - 4.0 * np.pi))
    mer = float(abs(meridian_diameter(dens) - np.pi))
    return _result(1, {"curvature": ctx.th("c1_curvature_tol") - curv,
                       "volume": ctx.th("c1_volume_tol") - vol,
                       "meridian": ctx.th("c1_meridian_tol") - mer},
                   {"curvature_dev": curv, "volume_dev": vol, "meridian_dev": mer})


def criterion_2(ctx):
    bound = chi_eval(ctx.beta, 0.0, 0.25)
    chi_max, chi_min, ratio_min = -np.inf, np.inf, np.inf
    for eps in ctx.schedule:
        chi = chi_field(ctx.beta, eps, ctx.grid).values
        chi_max, chi_min = max(chi_max, chi.max()), min(chi_min, chi.min())
        ratio = omega_eps_density(ctx.params(eps), ctx.geom, ctx.grid).values / ctx.geom.u0_d2(ctx.grid.nodes)
        ratio_min = min(ratio_min, ratio.min())
    return _result(2, {"chi_nonneg": chi_min, "chi_bounded": bound * (1 + 1e-12) - chi_max,
                       "omega_ratio": ratio_min - ctx.th("c2_gamma")},
                   {"k": ctx.k, "chi_max": chi_max, "chi_bound": bound, "min_ratio": ratio_min})


def rk4_local_order(problem, base_state, sigmas=(0.2, 0.1, 0.05), substeps=32):
    """Observed one-step order of the explicit scheme by step halving.

    The error of one step is measured against ``substeps`` steps in the
    weighted norm ``|delta increments| / (h u0'')`` that is uniform in the
    pole scale.  Returns the list of ``log2(e(sigma) / e(sigma/2))``.
    """
    g = problem.grid
    h = g.spacing
    mid = 0.5 * (g.nodes[1:] + g.nodes[:-1])
    scale = h * problem.geom.u0_d2(mid)
    dt0 = cfl_step(base_state, 1.0)

    def run(s, tau, n):
        for _ in range(n):
            s = advance(s, tau / n, "explicit-rk4")
        return s

    errs = []
    for sig in sigmas:
        tau = sig * dt0
        a, b = run(base_state, tau, 1), run(base_state, tau, substeps)
        errs.append(max(np.max(np.abs(a.increments - b.increments) / scale),
                        abs(a.anchor - b.anchor)))
    return [float(np.log2(e0 / e1)) for e0, e1 in zip(errs, errs[1:])]


def oscillating_state(problem, base, amplitude=0.3, cells_per_radian=0.5):
    """``base`` plus increments ``eta h u0'' sin(omega rho)`` with ``eta omega = amplitude``."""
    g = problem.grid
    h = g.spacing
    mid = 0.5 * (g.nodes[1:] + g.nodes[:-1])
    omega = cells_per_radian / h
    eta = amplitude / omega
    return problem.state(base.t, base.anchor,
                         base.increments + eta * h * problem.geom.u0_d2(mid) * np.sin(omega * mid))


def criterion_3(ctx):
    pr = FlowProblem(ctx.params(ctx.schedule[0]), ctx.geom, ctx.grid)
    ke = solve_twisted_ke(pr)
    cfg = SolverConfig()
    moved = step(ke, cfg, 1e-2)
    stationary = max(float(np.max(np.abs(moved.increments - ke.increments))),
                     abs(moved.anchor - ke.anchor))
    orders = rk4_local_order(pr, oscillating_state(pr, ke))
    start = initial_state(pr)
    c = 0.37
    short = SolverConfig(t_end=1.0)
    a = integrate_flow(pr, short, start).snapshots[-1]
    b = integrate_flow(pr, short, start.shifted(c)).snapshots[-1]
    shift_err = float(np.max(np.abs((b.phi.values - a.phi.values) - c * np.exp(ctx.beta * a.t))))
    return _result(3, {"stationary": ctx.th("c3_stationary_tol") - stationary,
                       "rk4_order": min(orders) - ctx.th("c3_min_order"),
                       "shift": ctx.th("c3_shift_tol") - shift_err},
                   {"stationary_change": stationary, "orders": orders, "shift_error": shift_err})


def criterion_4(ctx):
    worst_mono, worst_rel = -np.inf, 0.0
    for run in ctx.runs:
        m = np.array([r.mabuchi_twisted for r in run.reports])
        worst_mono = max(worst_mono, float(np.max(np.diff(m))))
        reps = {round(r.t, 6): r for r in run.reports}
        for tc in (1.0, 2.0):
            lo, hi = reps[round(tc - 0.01, 6)], reps[round(tc + 0.01, 6)]
            dm = (hi.mabuchi_twisted - lo.mabuchi_twisted) / (hi.t - lo.t)
            y = reps[tc].Y
            worst_rel = max(worst_rel, abs(dm + y) / y)
    return _result(4, {"monotone": ctx.th("c4_monotone_tol") - worst_mono,
                       "derivative": ctx.th("c4_derivative_rel") - worst_rel},
                   {"max_increase": worst_mono, "max_rel_derivative_error": worst_rel})


def criterion_5(ctx):
    drifts, values = [], []
    for run in ctx.runs:
        c = np.array([v for s, v in zip(run.snapshots, run.meta["conservation"]) if s.t <= 10.0 + 1e-12])
        drifts.append(float(np.max(np.abs(c - c[0])) / abs(c[0])))
        values.append(abs(c[0]))
    spread = max(values) / min(values)
    return _result(5, {"drift": ctx.th("c5_drift_rel") - max(drifts),
                       "spread": ctx.th("c5_spread") - spread},
                   {"drifts": drifts, "constants": values, "spread": spread})


def criterion_6(ctx):
    worst = np.inf
    for run in ctx.runs:
        worst = min(worst, float(run.monitor("t2_twisted_scalar_min").values.min()))
    floor = -4.0 * ctx.geom.n / ctx.beta - ctx.th("c6_slack")
    return _result(6, {"floor": worst - floor}, {"min_t2_scalar": worst, "floor": floor})


def criterion_7(ctx):
    a_max, dec = -np.inf, 0.0
    for run in ctx.runs:
        a = np.array([r.a_eps for r in run.reports])
        a_max = max(a_max, float(a.max()))
        dec = max(dec, float(np.max(-np.diff(a))))
    return _result(7, {"sign": ctx.th("c7_a_max") - a_max,
                       "monotone": ctx.th("c7_monotone_tol") - dec},
                   {"max_a": a_max, "max_decrease": dec})


def round_sphere_eigenvalue(grid, convention="kahler"):
    zero = RadialField(grid, np.zeros(grid.n_points))
    return poincare_eigenvalue(None, zero, convention=convention,
                               density=REFERENCE.u0_d2(grid.nodes), grid=grid)


# Legendre oracle: radial eigenfunction tanh(rho/2) = cos(polar angle), l = 1.
# Kahler Laplacian l(l+1)/2 = 1, Riemannian l(l+1) = 2.
ROUND_SPHERE_ORACLE = {"kahler": 1.0, "riemannian": 2.0}


def criterion_8(ctx):
    worst = np.inf
    for run in ctx.runs:
        worst = min(worst, float(run.monitor("poincare_eigenvalue").values.min()))
    ref = {c: round_sphere_eigenvalue(ctx.grid, c) for c in ROUND_SPHERE_ORACLE}
    ref_err = max(abs(ref[c] - ROUND_SPHERE_ORACLE[c]) for c in ref)
    return _result(8, {"lower_bound": worst - (ctx.beta - ctx.th("c8_slack")),
                       "reference": ctx.th("c8_reference_tol") - ref_err},
                   {"min_eigenvalue": worst, "reference": ref})


def criterion_9(ctx):
    names = ("max_abs_u", "max_grad_u", "max_abs_twisted_scalar")
    slopes = {n: -np.inf for n in names}
    levels = {n: [] for n in names}
    for run in ctx.runs:
        for n in names:
            m = run.monitor(n)
            slopes[n] = max(slopes[n], m.meta["slope"])
            levels[n].append(float(m.values.max()))
    ratios = {n: max(v) / min(v) for n, v in levels.items()}
    checks = {f"slope_{n}": ctx.th("c9_slope") - slopes[n] for n in names}
    checks.update({f"levels_{n}": ctx.th("c9_level_ratio") - ratios[n] for n in names})
    return _result(9, checks, {"slopes": slopes, "levels": levels, "level_ratios": ratios})


def criterion_10(ctx):
    table = ctx.sweep.convergence_table
    c0 = [row["c0"] for row in table]
    c1 = [row["c1"] for row in table]
    c2 = [row["c2"] for row in table]

    def decreasing(v):
        return min(a - b for a, b in zip(v, v[1:])) if len(v) > 1 else np.inf

    checks = {"c0_decreasing": decreasing(c0), "c1_decreasing": decreasing(c1),
              "c2_decreasing": decreasing(c2),
              "final_c0": ctx.th("c10_final_gap") - c0[-1]}
    return _result(10, checks, {"c0": c0, "c1": c1, "c2": c2})


def criterion_11(ctx):
    run = ctx.long_run
    cmp = ke_comparison_details(run, ctx.beta, ctx.geom, ctx.grid, 5.0)
    y = {round(r.t, 6): r.Y for r in run.reports}
    ratio = y[round(ctx.t_long, 6)] / y[1.0]
    return _result(11, {"mismatch": ctx.th("c11_mismatch") - cmp.mismatch,
                        "y_ratio": ctx.th("c11_y_ratio") - ratio},
                   {"mismatch": cmp.mismatch, "shift": cmp.shift, "y_ratio": ratio})


def w_monotonicity(problem, n_steps=100, dt=1e-3, tau_final=0.5):
    """W along the coupled system over ``n_steps`` metric steps.

    The metric is integrated forward with fixed steps; ``f`` is integrated
    backward from ``tau_final`` and a smooth constraint-normalized profile.
    Returns ``(times, W values, constraint values)`` in increasing time.
    """
    t_end = n_steps * dt
    times = tuple(np.round(np.arange(0.0, t_end + 0.5 * dt, dt), 12))
    traj = integrate_flow(problem, SolverConfig(t_end=t_end, snapshot_times=times, dt_max=dt,
                                                dt_initial=dt))
    snaps = traj.snapshots
    rho = problem.grid.nodes
    theta = theta_eps_density(problem.params, problem.geom, problem.grid).values
    beta = problem.beta
    f = RadialField(problem.grid, -np.log(tau_final) + 0.5 * np.tanh(rho / 2.0) + 0.3 / np.cosh(rho / 3.0))
    f = f + np.log(w_constraint(snaps[-1].psi_dd, f, tau_final))
    tau = tau_final
    ws = [w_functional(snaps[-1].psi_dd, f, tau, theta, problem.geom, beta=beta)]
    cons = [w_constraint(snaps[-1].psi_dd, f, tau)]
    for j in range(len(snaps) - 1, 0, -1):
        f, tau = coupled_w_evolve(snaps[j - 1], f, tau, snaps[j].t - snaps[j - 1].t)
        ws.append(w_functional(snaps[j - 1].psi_dd, f, tau, theta, problem.geom, beta=beta))
        cons.append(w_constraint(snaps[j - 1].psi_dd, f, tau))
    return [s.t for s in snaps], np.array(ws[::-1]), np.array(cons[::-1])


def criterion_12(ctx):
    pr = FlowProblem(ctx.params(ctx.schedule[0]), ctx.geom, ctx.grid)
    _, w, cons = w_monotonicity(pr)
    worst = float(np.min(np.diff(w)))
    return _result(12, {"monotone": worst + ctx.th("c12_tol")},
                   {"min_increment": worst, "constraint_range": [float(cons.min()), float(cons.max())]})


def cone_chart_sample(beta, c=1.0, n=100, n_phi=5):
    """Violations of both coefficient bounds on an ``n x n`` (r, eps) sample."""
    r = np.concatenate(([0.0], np.logspace(-6, 1, n - 1)))
    eps = np.logspace(-4, 0, n)
    lower, upper = cone_chart_bounds(beta, c)
    violations = 0
    worst = np.inf
    for phi in np.linspace(-c, c, n_phi):
        vals = cone_chart_coefficient(beta, eps[:, None], r[None, :], phi)
        violations += int(np.sum(vals < lower * (1 - 1e-12)) + np.sum(vals > upper * (1 + 1e-12)))
        worst = min(worst, float(np.min(vals - lower)), float(np.min(upper - vals)))
    return violations, worst


def criterion_13(ctx):
    total, worst = 0, np.inf
    for beta in (0.3, 0.5, 0.7):
        v, w = cone_chart_sample(beta)
        total += v
        worst = min(worst, w)
    return _result(13, {"bounds": worst if total == 0 else -float(total)},
                   {"violations": total, "closest_approach": worst})


def criterion_14(ctx):
    beta = 0.3
    alpha, r2 = holder_fit(football_offset(beta, ctx.grid))
    late = ctx.runs[-1].snapshots[-1] if ctx.runs else None
    alpha_late, r2_late = holder_fit(late.phi_total) if late is not None else (np.nan, np.nan)
    return _result(14, {"football_alpha": ctx.th("c14_alpha_tol") - abs(alpha - 2 * beta),
                        "football_r2": r2 - ctx.th("c14_r2"),
                        "late_alpha": alpha_late if 0.0 < alpha_late <= 1.0 else -1.0,
                        "late_r2": r2_late - ctx.th("c14_r2")},
                   {"football": (alpha, r2), "late": (alpha_late, r2_late)})


def criterion_15(ctx):
    """Run-file round trip and byte-identical repeated ``run`` output."""
    from . import cli
    tiny = {"beta": ctx.beta, "epsilon": 0.1, "grid": {"L": 20.0, "n_points": 128},
            "solver": {"t_end": 0.1, "normalization_horizon": 1.0}}
    checks = {}
    with tempfile.TemporaryDirectory() as tmp:
        run = run_epsilon(RegularizationParams(ctx.beta, 0.1, 1.0), SolverConfig(t_end=0.1),
                          ctx.geom, RadialGrid(20.0, 128), normalization_horizon=0.1)
        path = os.path.join(tmp, "run.json")
        persist_run(run, path)
        back = load_run(path)
        same = all(np.array_equal(a.increments, b.increments) and a.anchor == b.anchor and a.t == b.t
                   for a, b in zip(run.snapshots, back.snapshots))
        same &= all(a.row() == b.row() for a, b in zip(run.reports, back.reports))
        checks["round_trip"] = 0.0 if same else -1.0
        outs = []
        for i in range(2):
            out = os.path.join(tmp, f"out{i}")
            code = cli.execute_run(dict(tiny, output_dir=out))
            outs.append((out, code))
        ok = all(c == 0 for _, c in outs)
        for name in ("functionals.csv", "monitors.csv", "run.json"):
            ok &= filecmp.cmp(os.path.join(outs[0][0], name), os.path.join(outs[1][0], name),
                              shallow=False)
        checks["byte_identical"] = 0.0 if ok else -1.0
    return _result(15, checks, {})


CHECKS = {i: globals()[f"criterion_{i}"] for i in CRITERIA}


def run_criteria(ctx, numbers=None):
    """Evaluate criteria 1-14 (and 15); the run aggregates all of them."""
    numbers = sorted(CRITERIA) if numbers is None else sorted(numbers)
    results = []
    for i in numbers:
        results.append(CHECKS[i](ctx))
    return results
