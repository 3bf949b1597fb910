"""epsilon schedules, compact-set convergence, the football limit and run files."""

import json
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import (DegenerateMetricError, IncompleteRunError,
                     NoConvergenceError, NumericError, RunFileError, RunFileVersionError,
                     ShapeError, StiffnessError)
from .flow import FlowProblem, SolverConfig, integrate_flow, normalize_trajectory
from .functionals import (FunctionalReport, conservation_quantity, functional_report,
                          twist_ricci_potential_reference)
from .geometry import REFERENCE, RadialField, RadialGrid, ReferenceGeometry
from .monitors import MonitorSeries, standard_monitors
from .regularization import RegularizationParams, select_k

log = logging.getLogger(__name__)

RUN_FILE_VERSION = 1
DEFAULT_SCHEDULE = tuple(10.0 ** (-1.0 - 0.5 * i) for i in range(5))


# ------------------------------------------------------------ football

def football_potential(beta: float, grid: RadialGrid) -> RadialField:
    """``v = (2/beta) log(1 + e^(beta rho))``, the conical KE potential of angle 2 pi beta."""
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    return RadialField(grid, (2.0 / beta) * np.logaddexp(0.0, beta * grid.nodes))


def football_offset(beta: float, grid: RadialGrid) -> RadialField:
    """``v - u0`` without cancellation: the linear growth of both terms matches."""
    a = np.abs(grid.nodes)
    return RadialField(grid, (2.0 / beta) * np.log1p(np.exp(-beta * a)) - 2.0 * np.log1p(np.exp(-a)))


def football_density_values(beta, rho):
    e = np.exp(-beta * np.abs(rho))
    return 2.0 * beta * e / (1.0 + e) ** 2


def football_density(beta: float, grid: RadialGrid) -> RadialField:
    return RadialField(grid, football_density_values(beta, grid.nodes))


# ------------------------------------------------------------ runs

@dataclass
class EpsilonRun:
    """One normalized trajectory for fixed eps."""

    params: RegularizationParams
    snapshots: list
    reports: list = field(default_factory=list)
    monitors: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.snapshots:
            g = self.snapshots[0].grid
            if any(s.grid != g for s in self.snapshots):
                raise ShapeError("snapshots of one run must share a grid")

    @property
    def grid(self):
        return self.snapshots[0].grid

    @property
    def times(self):
        return [s.t for s in self.snapshots]

    def at(self, t: float):
        for s in self.snapshots:
            if abs(s.t - t) <= 1e-9:
                return s
        raise IncompleteRunError(f"run has no snapshot at t={t}")

    def monitor(self, name: str) -> MonitorSeries:
        for m in self.monitors:
            if m.name == name:
                return m
        raise KeyError(name)


def run_epsilon(params: RegularizationParams, config: SolverConfig,
                geom: ReferenceGeometry = REFERENCE, grid: RadialGrid = None,
                normalization_horizon: float = 10.0, with_monitors: bool = True) -> EpsilonRun:
    """Integrate, normalize the constant mode and evaluate functionals and monitors.

    The flow is integrated to ``max(t_end, normalization_horizon)`` so that
    the bounded trajectory can be identified from the late mean of phi_dot;
    snapshots after ``t_end`` are dropped.
    """
    grid = grid if grid is not None else RadialGrid()
    problem = FlowProblem(params, geom, grid)
    horizon = max(config.t_end, normalization_horizon)
    integ = SolverConfig(t_end=horizon, dt_safety=config.dt_safety,
                         snapshot_times=tuple(config.all_snapshot_times()),
                         max_steps=config.max_steps, scheme=config.scheme, dt_max=config.dt_max,
                         dt_initial=config.dt_initial, dt_growth=config.dt_growth)
    traj = integrate_flow(problem, integ)
    traj, delta = normalize_trajectory(traj, params.beta)
    snaps = [s for s in traj.snapshots if s.t <= config.t_end + 1e-12]
    twist = twist_ricci_potential_reference(params, geom, grid)
    reports = [functional_report(s, twist) for s in snaps]
    conservation = [conservation_quantity(s, twist) for s in snaps]
    meta = {"delta": delta, "steps": traj.steps, "rejected": traj.rejected,
            "scheme": config.scheme, "t_end": config.t_end, "horizon": horizon,
            "conservation": conservation, "status": "ok"}
    run = EpsilonRun(params, snaps, reports, [], meta)
    if with_monitors:
        run.monitors = standard_monitors(run, params.beta)
    return run


@dataclass
class SweepRecord:
    schedule: tuple
    runs: list
    convergence_table: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(b >= a for a, b in zip(self.schedule, self.schedule[1:])):
            raise ValueError("schedule must be strictly decreasing")


@dataclass(frozen=True)
class SweepSettings:
    beta: float = 0.5
    solver: SolverConfig = SolverConfig(t_end=2.0)
    gamma_target: float = 0.5
    k: Optional[float] = None
    window_half_width: float = 5.0
    compare_time: float = 2.0
    normalization_horizon: float = 10.0


def _run_task(args):
    params, solver, geom, grid, horizon = args
    try:
        return run_epsilon(params, solver, geom, grid, horizon), None
    except (StiffnessError, DegenerateMetricError, NoConvergenceError, NumericError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def run_sweep(config: SweepSettings, schedule=DEFAULT_SCHEDULE, beta: Optional[float] = None,
              geom: ReferenceGeometry = REFERENCE, grid: RadialGrid = None,
              jobs: int = 1) -> SweepRecord:
    """Run every eps of ``schedule`` with one shared k and tabulate compact gaps.

    A failing run is recorded in ``failures`` and skipped in the table; the
    remaining runs are unaffected.  Results do not depend on ``jobs``.
    """
    schedule = tuple(float(e) for e in schedule)
    beta = config.beta if beta is None else beta
    grid = grid if grid is not None else RadialGrid()
    k = config.k if config.k is not None else select_k(geom, grid, beta, schedule,
                                                       config.gamma_target)
    tasks = [(RegularizationParams(beta, e, k, config.gamma_target), config.solver, geom, grid,
              config.normalization_horizon) for e in schedule]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        results = [_run_task(t) for t in tasks]
    runs, failures = [], {}
    for eps, (run, err) in zip(schedule, results):
        if err is not None:
            log.warning("eps=%g failed: %s", eps, err)
            failures[eps] = err
        runs.append(run)
    table = []
    for a, b in zip(runs, runs[1:]):
        if a is None or b is None:
            continue
        if config.compare_time > min(a.times[-1], b.times[-1]) + 1e-12:
            continue
        c0, c1, c2 = compact_convergence(a, b, config.window_half_width, config.compare_time)
        table.append({"eps_a": a.params.epsilon, "eps_b": b.params.epsilon,
                      "t": config.compare_time, "window": config.window_half_width,
                      "c0": c0, "c1": c1, "c2": c2})
    return SweepRecord(schedule, runs, table, failures)


def compact_convergence(run_a: EpsilonRun, run_b: EpsilonRun, window_half_width: float = 5.0,
                        t: float = 2.0):
    """Sup-norm gaps of the potentials relative to omega_0 and of two derivatives on a window.

    C1 is measured on cell slopes and C2 on the densities ``u0'' + phi''``.
    """
    sa, sb = run_a.at(t), run_b.at(t)
    if sa.grid != sb.grid:
        raise ShapeError("runs live on different grids")
    g = sa.grid
    w = g.window(window_half_width)
    cells = w[1:] & w[:-1]
    pa = sa.problem.nodes_from(sa.anchor + sa.problem.params.k * sa.problem.chi[0],
                               sa.total_increments)
    pb = sb.problem.nodes_from(sb.anchor + sb.problem.params.k * sb.problem.chi[0],
                               sb.total_increments)
    c0 = float(np.max(np.abs(pa - pb)[w]))
    c1 = float(np.max(np.abs(sa.total_increments - sb.total_increments)[cells]) / g.spacing)
    c2 = float(np.max(np.abs(sa.density - sb.density)[w]))
    return c0, c1, c2


@dataclass
class KEComparison:
    mismatch: float
    shift: float
    unshifted: float
    converged: bool


def ke_comparison_details(run, beta: float, geom=REFERENCE, grid=None,
                          window: float = 5.0) -> KEComparison:
    """Density mismatch to the football at the last snapshot, modulo ``rho -> rho + c``."""
    state = run.snapshots[-1] if hasattr(run, "snapshots") else run
    g = state.grid
    w = g.window(window)
    rho = g.nodes[w]
    dens = state.density[w]

    def mismatch(c):
        return float(np.max(np.abs(dens / football_density_values(beta, rho + c) - 1.0)))

    base = mismatch(0.0)
    try:
        res = minimize_scalar(mismatch, bounds=(-1.0, 1.0), method="bounded",
                              options={"xatol": 1e-10})
        ok = bool(res.success)
    except (ValueError, RuntimeError):
        ok = False
    if not ok:
        return KEComparison(base, 0.0, base, False)
    if res.fun > base:
        # the unshifted match is already optimal
        return KEComparison(base, 0.0, base, True)
    return KEComparison(float(res.fun), float(res.x), base, True)


def ke_comparison(run, beta: float, geom=REFERENCE, grid=None, window: float = 5.0) -> float:
    return ke_comparison_details(run, beta, geom, grid, window).mismatch


# ------------------------------------------------------------ uniformity diagnostics

def energy_gap_constant(run: EpsilonRun) -> float:
    """``max_t |beta F - M| + |beta F0 - M|`` over the reports."""
    b = run.params.beta
    return float(max(abs(b * r.F_func - r.mabuchi_twisted) + abs(b * r.F0_func - r.mabuchi_twisted)
                     for r in run.reports))


def oscillation_samples(run: EpsilonRun):
    """Pairs ``((1/V) int phi dV0, osc phi)`` per snapshot."""
    out = []
    for s, r in zip(run.snapshots, run.reports):
        pr = s.problem
        phi = pr.nodes_from(s.anchor + pr.params.k * pr.chi[0], s.total_increments)
        mean0 = 2.0 * np.pi * np.dot(pr.grid.trapezoid_weights, phi * pr.u0dd) / pr.geom.total_volume
        out.append((float(mean0), float(np.ptp(phi))))
    return out


def fit_oscillation_bound(samples):
    """Least-squares slope A, then the smallest B making ``osc <= A m + B`` hold."""
    m = np.array([p[0] for p in samples])
    o = np.array([p[1] for p in samples])
    a = float(np.polyfit(m, o, 1)[0]) if np.ptp(m) > 0 else 0.0
    b = float(np.max(o - a * m))
    return a, b


# ------------------------------------------------------------ run files

def _encode_monitor(m: MonitorSeries):
    return {"name": m.name, "times": [float(x) for x in m.times],
            "values": [float(x) for x in m.values],
            "bound": None if m.bound is None else [m.bound[0], float(m.bound[1]), float(m.bound[2])],
            "meta": {k: float(v) for k, v in m.meta.items()}}


def _decode_monitor(d):
    bound = None if d["bound"] is None else (d["bound"][0], d["bound"][1], d["bound"][2])
    return MonitorSeries(d["name"], d["times"], d["values"], bound, dict(d["meta"]))


def run_to_dict(run: EpsilonRun) -> dict:
    g = run.grid
    p = run.params
    geom = run.snapshots[0].problem.geom
    return {
        "version": RUN_FILE_VERSION,
        "params": {"beta": p.beta, "epsilon": p.epsilon, "k": p.k, "gamma_target": p.gamma_target},
        "geometry": {"n": geom.n, "F0": geom.F0},
        "grid": {"rho_max": g.rho_max, "n_points": g.n_points},
        "snapshot_times": [s.t for s in run.snapshots],
        "snapshots": [{"t": s.t, "anchor": s.anchor, "increments": [float(x) for x in s.increments]}
                      for s in run.snapshots],
        "reports": [list(r.row()) for r in run.reports],
        "monitors": [_encode_monitor(m) for m in run.monitors],
        "meta": _plain(run.meta),
    }


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def persist_run(run: EpsilonRun, path) -> None:
    """Write ``run`` as JSON, atomically (temporary file then rename)."""
    text = json.dumps(run_to_dict(run), allow_nan=False, separators=(",", ":"))
    write_atomic(path, text)


def write_atomic(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run_from_dict(d: dict) -> EpsilonRun:
    if not isinstance(d, dict) or "version" not in d:
        raise RunFileError("run file lacks a version field")
    if d["version"] != RUN_FILE_VERSION:
        raise RunFileVersionError(f"unsupported run file version {d['version']!r}")
    try:
        p = d["params"]
        params = RegularizationParams(p["beta"], p["epsilon"], p["k"], p["gamma_target"])
        geom = ReferenceGeometry(d["geometry"]["n"], d["geometry"]["F0"])
        grid = RadialGrid(d["grid"]["rho_max"], d["grid"]["n_points"])
        problem = FlowProblem(params, geom, grid)
        snaps = [problem.state(s["t"], s["anchor"], np.array(s["increments"], dtype=float))
                 for s in d["snapshots"]]
        reports = [FunctionalReport(*row) for row in d["reports"]]
        monitors = [_decode_monitor(m) for m in d["monitors"]]
        meta = dict(d["meta"])
    except (KeyError, TypeError, ValueError) as exc:
        raise RunFileError(f"malformed run file: {exc}") from exc
    if [s.t for s in snaps] != list(d["snapshot_times"]):
        raise RunFileError("snapshot times disagree with snapshots")
    return EpsilonRun(params, snaps, reports, monitors, meta)


def load_run(path) -> EpsilonRun:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise RunFileError(f"cannot read {path}: {exc}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RunFileError(f"truncated or malformed run file {path}: {exc}") from exc
    return run_from_dict(d)
