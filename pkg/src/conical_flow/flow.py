"""Time integration of the twisted parabolic Monge-Ampere flow for one eps.

The unknown is the potential ``phi`` relative to ``omega_eps``; the flow is

    d phi/dt = log(psi''/u0'') + F0 + beta (k chi + phi) + (1 - beta) log(eps^2 + |s|^2)

with ``psi'' = omega_eps + phi''`` and zero Neumann data at both ends.

Internally phi is stored as its value at the first node (the *anchor*) plus
the ``n - 1`` nodal increments.  Near the poles psi'' is about e^(-|rho|),
so second differences of O(1) nodal values would lose every significant
digit there; increments keep relative accuracy.  The increment system is
autonomous, and the anchor obeys ``a' = beta a + g(increments)``.  Every
scheme carries the old anchor by the exact factor e^(beta tau), which makes
the constant mode ``phi -> phi + c e^(beta t)`` exact.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import lapack

from .errors import DegenerateMetricError, IncompleteRunError, NoConvergenceError, StiffnessError
from .functionals import alpha_eps
from .geometry import REFERENCE, RadialField, RadialGrid, ReferenceGeometry, neumann_laplacian
from .regularization import (RegularizationParams, chi_field, chi_increments, omega_eps_density,
                             ricci_potential_eps, twist_potential, twist_potential_increments)

log = logging.getLogger(__name__)

SCHEMES = ("explicit-rk4", "imex", "ros2")
DT_FLOOR = 1e-12
ROS2_GAMMA = 1.0 + 1.0 / np.sqrt(2.0)


@dataclass(frozen=True)
class SolverConfig:
    """Time-stepping controls.

    ``dt_safety`` is the CFL factor of the explicit scheme.  The implicit
    schemes start at ``dt_initial`` and grow geometrically by ``dt_growth``
    up to ``dt_max``.
    """

    t_end: float = 1.0
    dt_safety: float = 0.2
    snapshot_times: tuple = ()
    max_steps: int = 2_000_000
    scheme: str = "ros2"
    dt_max: float = 1e-2
    dt_initial: float = 1e-4
    dt_growth: float = 1.2

    def __post_init__(self):
        if not 0.0 < self.dt_safety <= 1.0:
            raise ValueError(f"dt_safety must lie in (0, 1], got {self.dt_safety}")
        if not self.t_end > 0.0:
            raise ValueError(f"t_end must be > 0, got {self.t_end}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not 0.0 < self.dt_initial <= self.dt_max:
            raise ValueError("need 0 < dt_initial <= dt_max")
        if self.dt_growth < 1.0:
            raise ValueError("dt_growth must be >= 1")
        times = tuple(sorted(float(t) for t in self.snapshot_times))
        if any(t < 0.0 for t in times):
            raise ValueError("snapshot times must be >= 0")
        object.__setattr__(self, "snapshot_times", times)

    def all_snapshot_times(self):
        """User times plus 0, 1, 2 and t_end, restricted to [0, t_end]."""
        times = {0.0, float(self.t_end)}
        times.update(t for t in (1.0, 2.0) if t <= self.t_end)
        times.update(t for t in self.snapshot_times if t <= self.t_end)
        return sorted(times)


class FlowProblem:
    """Precomputed tables for one (params, grid) pair."""

    def __init__(self, params: RegularizationParams, geom: ReferenceGeometry = REFERENCE,
                 grid: RadialGrid = None):
        if grid is None:
            grid = RadialGrid()
        if params.epsilon <= 0.0:
            raise ValueError("the flow needs epsilon > 0")
        self.params, self.geom, self.grid = params, geom, grid
        self.beta = params.beta
        self.h = grid.spacing
        rho = grid.nodes
        self.u0dd = geom.u0_d2(rho)
        self.log_u0dd = np.log(self.u0dd)
        self.omega_eps = omega_eps_density(params, geom, grid).values
        self.chi = chi_field(params.beta, params.epsilon, grid).values
        self.dchi = chi_increments(params.beta, params.epsilon, grid)
        self.twist = twist_potential(params, geom, grid).values
        self.dtwist = twist_potential_increments(params, geom, grid)
        # increments of G + beta k chi, which enter N(d) unchanged
        self.forcing_increments = self.dtwist + self.beta * params.k * self.dchi

    # pointwise pieces ----------------------------------------------------
    def density(self, d):
        return self.omega_eps + neumann_laplacian(d, self.h)

    def log_ratio(self, dens):
        return np.log(dens) - self.log_u0dd

    def rate(self, d, dens=None):
        """Time derivative of the increments, ``N(d)``."""
        if dens is None:
            dens = self.density(d)
        ell = self.log_ratio(dens)
        return np.diff(ell) + self.forcing_increments + self.beta * d

    def anchor_forcing(self, dens):
        """``g`` in ``a' = beta a + g``: the first-node RHS without ``beta a``."""
        return (np.log(dens[0]) - self.log_u0dd[0] + self.twist[0]
                + self.beta * self.params.k * self.chi[0])

    def jacobian(self, dens, include_beta=True):
        """Symmetric tridiagonal Jacobian of N(d): (diagonal, off-diagonal)."""
        c = 1.0 / (self.h ** 2 * dens)
        m = c.shape[0] - 1
        left = c[:m].copy()
        left[0] *= 2.0
        right = c[1:].copy()
        right[-1] *= 2.0
        diag = -(left + right)
        if include_beta:
            diag = diag + self.beta
        return diag, c[1:m]

    def nodes_from(self, anchor, d):
        return anchor + np.concatenate(([0.0], np.cumsum(d)))

    def state(self, t, anchor, d):
        return FlowState(self, float(t), float(anchor), np.array(d, dtype=float))


class FlowState:
    """Flow time, potential and cached derived fields for one eps-run.

    Attributes
    ----------
    t : float
    anchor : float
        Value of ``phi`` at the first node.
    increments : ndarray
        ``phi[i+1] - phi[i]``.
    """

    def __init__(self, problem: FlowProblem, t, anchor, increments):
        self.problem = problem
        self.t = t
        self.anchor = anchor
        self.increments = increments
        self.increments.setflags(write=False)
        dens = problem.density(increments)
        if np.any(dens <= 0.0):
            raise DegenerateMetricError(f"Kahler condition violated at t={t}")
        self.density = dens
        self.rate = problem.rate(increments, dens)
        self.anchor_rate = problem.beta * anchor + problem.anchor_forcing(dens)

    @property
    def grid(self):
        return self.problem.grid

    @property
    def phi(self) -> RadialField:
        return RadialField(self.grid, self.problem.nodes_from(self.anchor, self.increments))

    @property
    def phi_total(self) -> RadialField:
        return RadialField(self.grid, self.phi.values + self.problem.params.k * self.problem.chi)

    @property
    def total_increments(self):
        """Increments of ``phi + k chi`` (the potential relative to omega_0)."""
        return self.increments + self.problem.params.k * self.problem.dchi

    @property
    def psi_dd(self) -> RadialField:
        return RadialField(self.grid, self.density)

    @property
    def phi_dot(self) -> RadialField:
        return RadialField(self.grid, self.problem.nodes_from(self.anchor_rate, self.rate))

    def phi_dot_shape(self):
        """``phi_dot - phi_dot[0]``, free of the large constant mode."""
        return self.problem.nodes_from(0.0, self.rate)

    def shifted(self, c):
        """Same state with ``phi + c``."""
        return FlowState(self.problem, self.t, self.anchor + c, self.increments.copy())


# ------------------------------------------------------------ RHS evaluation

def flow_rhs(state: FlowState, params=None, geom=None, grid=None) -> RadialField:
    """Pointwise right side in the form written with ``omega_0``."""
    pr = state.problem
    phi = pr.nodes_from(state.anchor, state.increments)
    dens = state.density
    if np.any(dens <= 0.0):
        raise DegenerateMetricError("psi'' must be positive")
    out = (np.log(dens / pr.u0dd) + pr.geom.F0 + pr.beta * (pr.params.k * pr.chi + phi)
           + (1.0 - pr.beta) * np.log(pr.params.epsilon ** 2 + pr.geom.s_norm_sq(pr.grid.nodes)))
    return RadialField(pr.grid, out)


def flow_rhs_eps_form(state: FlowState) -> RadialField:
    """Same right side written with ``omega_eps`` and ``F_eps``."""
    pr = state.problem
    phi = pr.nodes_from(state.anchor, state.increments)
    f_eps = ricci_potential_eps(pr.params, pr.geom, pr.grid).values
    out = np.log(state.density / pr.omega_eps) + f_eps + pr.beta * (pr.params.k * pr.chi + phi)
    return RadialField(pr.grid, out)


# ------------------------------------------------------------ constants

def initial_constant(params: RegularizationParams, geom: ReferenceGeometry = REFERENCE,
                     grid: RadialGrid = None) -> float:
    """Provisional initial value ``-(1/(beta V)) int (F_eps + k beta chi) dV_eps``.

    This is the initial constant with the (unknown in advance) integral
    over the whole future flow dropped; see :func:`normalize_trajectory`.
    """
    dens = omega_eps_density(params, geom, grid).values
    f_eps = ricci_potential_eps(params, geom, grid).values
    chi = chi_field(params.beta, params.epsilon, grid).values
    integrand = (f_eps + params.k * params.beta * chi) * dens
    total = 2.0 * np.pi * np.dot(grid.trapezoid_weights, integrand)
    return float(-total / (params.beta * geom.total_volume))


def initial_state(problem: FlowProblem, constant: Optional[float] = None) -> FlowState:
    if constant is None:
        constant = initial_constant(problem.params, problem.geom, problem.grid)
    return problem.state(0.0, constant, np.zeros(problem.grid.n_points - 1))


# ------------------------------------------------------------ steppers

def _phi1(z):
    return np.expm1(z) / z if z != 0.0 else 1.0


def _factor(diag, off, tau):
    """LDL^T factors of ``I - tau J`` for a symmetric tridiagonal J."""
    d, e, info = lapack.dpttrf(1.0 - tau * diag, -tau * off)
    if info != 0:
        raise np.linalg.LinAlgError(f"tridiagonal factorization failed (info={info})")
    return d, e


def _solve(factors, b):
    x, info = lapack.dpttrs(factors[0], factors[1], b)
    if info != 0:
        raise np.linalg.LinAlgError(f"tridiagonal solve failed (info={info})")
    return x


def cfl_step(state: FlowState, dt_safety: float) -> float:
    """Explicit stability limit ``sigma h^2 min(psi'')``."""
    return dt_safety * state.problem.h ** 2 * float(np.min(state.density))


def _try_step(state: FlowState, tau: float, scheme: str) -> FlowState:
    pr = state.problem
    beta = pr.beta
    d0, a0 = state.increments, state.anchor
    g0 = state.anchor_rate - beta * a0
    ez = np.exp(beta * tau)
    if scheme == "explicit-rk4":
        k1 = state.rate
        dens2 = pr.density(d0 + 0.5 * tau * k1)
        _check(dens2)
        k2 = pr.rate(d0 + 0.5 * tau * k1, dens2)
        dens3 = pr.density(d0 + 0.5 * tau * k2)
        _check(dens3)
        k3 = pr.rate(d0 + 0.5 * tau * k2, dens3)
        dens4 = pr.density(d0 + tau * k3)
        _check(dens4)
        k4 = pr.rate(d0 + tau * k3, dens4)
        d1 = d0 + tau / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        g = [g0, pr.anchor_forcing(dens2), pr.anchor_forcing(dens3), pr.anchor_forcing(dens4)]
        eh = np.exp(0.5 * beta * tau)
        a1 = ez * a0 + tau / 6.0 * (ez * g[0] + 2.0 * eh * (g[1] + g[2]) + g[3])
        return pr.state(state.t + tau, a1, d1)
    if scheme == "imex":
        diag, off = pr.jacobian(state.density, include_beta=False)
        delta = _solve(_factor(diag, off, tau), tau * state.rate)
        d1 = d0 + delta
        a1 = ez * a0 + tau * _phi1(beta * tau) * g0
        return pr.state(state.t + tau, a1, d1)
    # ros2: two-stage L-stable Rosenbrock-W method, second order
    diag, off = pr.jacobian(state.density)
    fac = _factor(diag, off, ROS2_GAMMA * tau)
    k1 = _solve(fac, state.rate)
    dens_mid = pr.density(d0 + tau * k1)
    _check(dens_mid)
    k2 = _solve(fac, pr.rate(d0 + tau * k1, dens_mid) - 2.0 * k1)
    d1 = d0 + tau * (1.5 * k1 + 0.5 * k2)
    # a = e^(beta t) a0 + (exact response to g0) + b, where b' = beta b + g(d) - g0
    # joins the Rosenbrock stages: g sits on the stiffest node, and quadrature
    # weights on it lose an order
    gt = ROS2_GAMMA * tau
    dg = 2.0 / (pr.h ** 2 * state.density[0])
    wb = 1.0 - gt * beta
    k1b = gt * dg * k1[0] / wb
    g_mid = pr.anchor_forcing(dens_mid) - g0 + beta * tau * k1b
    k2b = (g_mid - 2.0 * k1b + gt * dg * k2[0]) / wb
    a1 = ez * a0 + tau * _phi1(beta * tau) * g0 + tau * (1.5 * k1b + 0.5 * k2b)
    return pr.state(state.t + tau, a1, d1)


def advance(state: FlowState, tau: float, scheme: str = "ros2") -> FlowState:
    """One step of size ``tau`` without step-size control or floor."""
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    return _try_step(state, tau, scheme)


def _check(dens):
    if np.any(dens <= 0.0):
        raise DegenerateMetricError("stage density not positive")


def step(state: FlowState, config: SolverConfig, dt: Optional[float] = None) -> FlowState:
    """Advance one step, halving on loss of positivity.

    For ``explicit-rk4`` the step is the CFL limit unless ``dt`` is given
    (smaller values are honored).  Implicit schemes require ``dt``.

    Raises
    ------
    StiffnessError
        If the step falls below 1e-12.
    """
    tau = dt
    if config.scheme == "explicit-rk4":
        limit = cfl_step(state, config.dt_safety)
        tau = limit if dt is None else dt
    elif tau is None:
        tau = config.dt_initial
    while True:
        if tau < DT_FLOOR:
            pr = state.problem
            i = int(np.argmin(state.density))
            raise StiffnessError(
                f"time step {tau:.3e} below {DT_FLOOR:g} at t={state.t:.6g}",
                diagnostics={"t": state.t, "dt": tau, "scheme": config.scheme,
                             "min_density": float(state.density[i]),
                             "argmin_rho": float(pr.grid.nodes[i]),
                             "max_rate": float(np.max(np.abs(state.rate)))})
        try:
            return _try_step(state, tau, config.scheme)
        except (DegenerateMetricError, np.linalg.LinAlgError, FloatingPointError):
            tau *= 0.5


@dataclass
class Trajectory:
    """Snapshots plus per-step series of one integration."""

    snapshots: list
    step_times: np.ndarray
    step_Y: np.ndarray
    rejected: int = 0
    steps: int = 0
    meta: dict = field(default_factory=dict)


def gradient_energy(state: FlowState) -> float:
    """``Y = (1/V) int |d phi_dot|^2 dV = (2 pi / V) int (phi_dot')^2 drho``."""
    pr = state.problem
    return float(2.0 * np.pi / pr.geom.total_volume * np.sum(state.rate ** 2) / pr.h)


def integrate_flow(problem: FlowProblem, config: SolverConfig,
                   start: Optional[FlowState] = None) -> Trajectory:
    """Integrate from ``start`` (default: the provisional initial constant) to t_end."""
    state = start if start is not None else initial_state(problem)
    targets = [t for t in config.all_snapshot_times() if t >= state.t - 1e-14]
    snapshots = []
    times, ys = [state.t], [gradient_energy(state)]
    if targets and abs(targets[0] - state.t) < 1e-14:
        snapshots.append(state)
        targets = targets[1:]
    dt = config.dt_initial
    steps = rejected = 0
    for target in targets:
        while state.t < target - 1e-13:
            if steps >= config.max_steps:
                raise StiffnessError(f"max_steps={config.max_steps} reached at t={state.t}")
            remaining = target - state.t
            if config.scheme == "explicit-rk4":
                tau = min(cfl_step(state, config.dt_safety), remaining)
                if tau < DT_FLOOR:
                    step(state, config, tau)  # raises with diagnostics
            else:
                tau = min(dt, remaining)
                if remaining - tau < 1e-3 * tau:
                    tau = remaining
            new = step(state, config, tau)
            taken = new.t - state.t
            if taken < tau * (1.0 - 1e-12):
                rejected += 1
                dt = taken
            elif config.scheme != "explicit-rk4":
                dt = min(config.dt_max, max(dt, taken) * config.dt_growth)
            state = new
            steps += 1
            times.append(state.t)
            ys.append(gradient_energy(state))
        # land exactly on the target time
        state = problem.state(target, state.anchor, state.increments)
        times[-1] = target
        snapshots.append(state)
    return Trajectory(snapshots, np.array(times), np.array(ys), rejected, steps,
                      {"scheme": config.scheme})


# ------------------------------------------------------------ normalization

def gradient_integral(trajectory: Trajectory, beta: float) -> float:
    """Trapezoid of ``e^(-beta s) Y(s)`` over the recorded steps."""
    t, y = trajectory.step_times, trajectory.step_Y
    if t.size < 2:
        raise IncompleteRunError("trajectory carries no gradient series")
    f = np.exp(-beta * t) * y
    return float(np.sum(0.5 * (f[1:] + f[:-1]) * np.diff(t)))


def constant_correction(trajectory: Trajectory, beta: float, method: str = "endpoint") -> float:
    """Shift ``delta`` with ``phi -> phi + delta e^(beta t)`` giving the bounded trajectory.

    Along the semi-discrete flow ``alpha' = beta alpha - Y`` holds exactly
    (summation by parts), where ``alpha`` is the volume mean of phi_dot.
    The bounded trajectory therefore has ``delta = -e^(-beta T) alpha(T) / beta``
    up to the neglected tail ``int_T^inf e^(-beta s) Y``.  ``method="quadrature"``
    uses ``(int_0^T e^(-beta s) Y - alpha(0)) / beta`` instead; its trapezoid
    error is amplified by ``e^(beta t)`` when the shift is applied.
    """
    if method == "endpoint":
        last = trajectory.snapshots[-1]
        return float(-np.exp(-beta * last.t) * alpha_eps(last) / beta)
    if method == "quadrature":
        first = trajectory.snapshots[0]
        return (gradient_integral(trajectory, beta) - alpha_eps(first)) / beta
    raise ValueError(f"unknown method {method!r}")


def shift_trajectory(trajectory: Trajectory, delta: float) -> Trajectory:
    """Apply ``phi -> phi + delta e^(beta t)`` to every snapshot (exact)."""
    snaps = []
    for s in trajectory.snapshots:
        snaps.append(s.shifted(delta * np.exp(s.problem.beta * s.t)))
    return Trajectory(snaps, trajectory.step_times, trajectory.step_Y,
                      trajectory.rejected, trajectory.steps, dict(trajectory.meta))


def normalize_trajectory(trajectory: Trajectory, beta: float, method: str = "endpoint"):
    """Shift a raw trajectory onto the bounded one.

    Returns ``(trajectory, delta)`` with every snapshot moved by
    ``delta e^(beta t)``; see :func:`constant_correction` for ``method``.

    Raises
    ------
    IncompleteRunError
        If ``method="quadrature"`` and the gradient series is missing.
    """
    if not trajectory.snapshots:
        raise IncompleteRunError("trajectory has no snapshots")
    delta = constant_correction(trajectory, beta, method)
    return shift_trajectory(trajectory, delta), delta


# ------------------------------------------------------------ stationary solve

def solve_twisted_ke(params: RegularizationParams, geom: ReferenceGeometry = REFERENCE,
                     grid: RadialGrid = None, tol: float = 1e-9, max_iter: int = 200,
                     initial: Optional[np.ndarray] = None) -> FlowState:
    """Stationary point of the flow by damped Newton on the increments.

    Solves ``log(psi''/u0'') + F0 + beta (k chi + phi) + (1 - beta) log(eps^2 + |s|^2) = 0``
    with Neumann data and returns it as a :class:`FlowState` at t = 0.

    Raises
    ------
    NoConvergenceError
        If the residual is not below ``tol`` after ``max_iter`` iterations.
    """
    problem = params if isinstance(params, FlowProblem) else FlowProblem(params, geom, grid)
    pr = problem
    d = np.zeros(pr.grid.n_points - 1) if initial is None else np.array(initial, dtype=float)
    dens = pr.density(d)
    res = pr.rate(d, dens)
    norm = np.max(np.abs(res))
    target = 1e-3 * tol / pr.grid.n_points
    for it in range(max_iter):
        if norm <= target:
            break
        diag, off = pr.jacobian(dens)
        delta = _solve_symmetric_tridiagonal(diag, off, -res)
        lam = 1.0
        accepted = False
        while lam > 1e-10:
            trial = d + lam * delta
            tdens = pr.density(trial)
            if np.all(tdens > 0.0):
                tres = pr.rate(trial, tdens)
                tnorm = np.max(np.abs(tres))
                if tnorm < (1.0 - 1e-4 * lam) * norm:
                    accepted = True
                    break
            lam *= 0.5
        if not accepted:
            # stagnation at round-off level is fine, anything else is not
            if norm * pr.grid.n_points <= tol:
                break
            raise NoConvergenceError(f"line search failed at iteration {it}, residual {norm:.3e}")
        d, dens, res, norm = trial, tdens, tres, tnorm
    else:
        if norm * pr.grid.n_points > tol:
            raise NoConvergenceError(f"Newton did not converge: residual {norm:.3e}")
    anchor = -pr.anchor_forcing(dens) / pr.beta
    state = pr.state(0.0, anchor, d)
    full = np.max(np.abs(flow_rhs(state).values))
    if full > tol:
        raise NoConvergenceError(f"stationary residual {full:.3e} exceeds {tol:g}")
    return state


def _solve_symmetric_tridiagonal(diag, off, b):
    # general tridiagonal solve (the Jacobian is symmetric but indefinite)
    x = lapack.dgtsv(off.copy(), diag.copy(), off.copy(), b.copy())
    if x[-1] != 0:
        raise np.linalg.LinAlgError("singular Jacobian")
    return x[3]
