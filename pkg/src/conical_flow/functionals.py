"""Energy functionals and potential-derived scalars.

All functionals take the potential relative to omega_0 (``phi + k chi``).
Densities default to ``u0'' + L(phi)`` with the mirror-ghost Laplacian of
:func:`geometry.neumann_laplacian`.  With trapezoid weights that Laplacian
satisfies exact summation by parts, so in n = 1 ``I = 2 J`` holds to
round-off and volumes are preserved exactly.

Integrals written ``(1/V) int . dV`` are 2 pi times a trapezoid sum divided
by V = 4 pi.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import lapack
from scipy.special import logsumexp

from .errors import DomainError
from .geometry import REFERENCE, RadialField, neumann_laplacian, second_derivative


# ------------------------------------------------------------ helpers

def _increments(phi):
    return np.diff(phi.values)


def _density(phi, density, geom):
    if density is not None:
        return density.values if isinstance(density, RadialField) else np.asarray(density)
    return geom.u0_d2(phi.grid.nodes) + neumann_laplacian(_increments(phi), phi.grid.spacing)


def _mean(values, weight, grid, geom):
    """``(1/V) int values weight drho dtheta``."""
    return float(2.0 * np.pi * np.dot(grid.trapezoid_weights, values * weight) / geom.total_volume)


def _log_mean_exp(exponent, weight, grid, geom):
    """``log((1/V) int e^exponent weight drho dtheta)`` without overflow."""
    w = grid.trapezoid_weights * weight
    return float(logsumexp(exponent, b=w) + np.log(2.0 * np.pi / geom.total_volume))


def twist_ricci_potential_reference(params, geom=REFERENCE, grid=None):
    """``u_omega0 = F0 + (1-beta) log(eps^2+|s|^2) + c`` with ``(1/V) int e^-u dV0 = 1``."""
    rho = grid.nodes
    raw = geom.F0 + (1.0 - params.beta) * np.log(params.epsilon ** 2 + geom.s_norm_sq(rho))
    c = _log_mean_exp(-raw, geom.u0_d2(rho), grid, geom)
    return RadialField(grid, raw + c)


def _tail(grid, weight, values):
    """Trapezoid tail beyond both ends for an exponentially decaying integrand.

    Fits ``A e^(-kappa |rho|)`` to the last two nodes of ``weight`` and ``values``
    growing at most linearly, and integrates ``values * weight`` to infinity.
    """
    h = grid.spacing
    total = 0.0
    for end, prev in ((0, 1), (-1, -2)):
        w0, w1 = weight[end], weight[prev]
        if w0 <= 0.0 or w1 <= w0:
            continue
        kappa = np.log(w1 / w0) / h
        v0, slope = values[end], (values[end] - values[prev]) / h
        # int_0^inf (v0 + slope x) w0 e^(-kappa x) dx
        total += w0 * (v0 / kappa + slope / kappa ** 2)
    return total


def log_potential_reference(beta, geom=REFERENCE, grid=None):
    """``H = F0 + (1-beta) log|s|^2 + c`` normalized against dV0 (tail included)."""
    rho = grid.nodes
    raw = geom.F0 + (1.0 - beta) * geom.log_s_norm_sq(rho)
    u0dd = geom.u0_d2(rho)
    integrand = np.exp(-raw) * u0dd
    total = np.dot(grid.trapezoid_weights, integrand) + _tail(grid, integrand, np.ones_like(rho))
    c = np.log(2.0 * np.pi * total / geom.total_volume)
    return RadialField(grid, raw + c)


# ------------------------------------------------------------ Aubin and Ding

def aubin_I(phi_total: RadialField, geom=REFERENCE, grid=None, density=None) -> float:
    """``(1/V) int phi (dV0 - dV_phi)``; invariant under adding constants."""
    dens = _density(phi_total, density, geom)
    g = phi_total.grid
    centred = phi_total.values - phi_total.values[g.n_points // 2]
    return _mean(centred, geom.u0_d2(g.nodes) - dens, g, geom)


def aubin_J(phi_total: RadialField, geom=REFERENCE, grid=None) -> float:
    """n = 1 closed form ``(1/(2V)) 2 pi int (phi')^2 drho`` on cell increments."""
    g = phi_total.grid
    d = _increments(phi_total)
    return float(np.pi * np.sum(d * d) / g.spacing / geom.total_volume)


def ding_F0(phi_total: RadialField, geom=REFERENCE, grid=None, offset: float = 0.0) -> float:
    """``J - (1/V) int phi dV0`` for the potential ``phi_total + offset``.

    Pass a large constant separately through ``offset``: the translation law
    ``F0(phi + c) = F0(phi) - c`` is then applied exactly.
    """
    g = phi_total.grid
    u0dd = geom.u0_d2(g.nodes)
    volume = np.dot(g.trapezoid_weights, u0dd)
    mean0 = float(np.dot(g.trapezoid_weights, phi_total.values * u0dd) / volume)
    return aubin_J(phi_total, geom) - mean0 - offset


def ding_F(phi_total: RadialField, geom=REFERENCE, grid=None, twist=None, params=None) -> float:
    """``F0 - log((1/V) int e^(-u_omega0 - phi) dV0)``; invariant under constants.

    ``twist`` is the normalized ``u_omega0`` field; it is built from
    ``params`` when not given.
    """
    g = phi_total.grid
    if twist is None:
        twist = twist_ricci_potential_reference(params, geom, g)
    centre = phi_total.values[g.n_points // 2]
    centred = RadialField(g, phi_total.values - centre)
    lme = _log_mean_exp(-twist.values - centred.values, geom.u0_d2(g.nodes), g, geom)
    return ding_F0(centred, geom) - lme


# ------------------------------------------------------------ Mabuchi

def _entropy(dens, u0dd, grid, geom):
    return _mean(np.log(dens / u0dd), dens, grid, geom)


def mabuchi_twisted(phi_total: RadialField, geom=REFERENCE, grid=None, params=None,
                    density=None, twist=None) -> float:
    """Twisted Mabuchi energy

    ``-beta (I - J) - (1/V) int u_omega0 (dV0 - dV_phi) + (1/V) int log(omega_phi/omega_0) dV_phi``.
    """
    g = phi_total.grid
    dens = _density(phi_total, density, geom)
    u0dd = geom.u0_d2(g.nodes)
    if twist is None:
        twist = twist_ricci_potential_reference(params, geom, g)
    # I and J are paired through the potential's own discrete Laplacian so that
    # I = 2 J holds exactly; the measure terms use the supplied density
    i_val = aubin_I(phi_total, geom)
    j_val = aubin_J(phi_total, geom)
    return (-params.beta * (i_val - j_val) - _mean(twist.values, u0dd - dens, g, geom)
            + _entropy(dens, u0dd, g, geom))


def mabuchi_log(phi_total: RadialField, geom=REFERENCE, grid=None, beta=None,
                density=None) -> float:
    """Log Mabuchi energy with ``H = F0 + (1 - beta) log|s|^2 + c``.

    ``log|s|^2`` grows like ``-|rho|`` while the measures decay exponentially;
    the part of the pairing beyond the window is added from an exponential
    fit to the last two nodes.
    """
    g = phi_total.grid
    dens = _density(phi_total, density, geom)
    u0dd = geom.u0_d2(g.nodes)
    h_pot = log_potential_reference(beta, geom, g).values
    i_val = aubin_I(phi_total, geom)
    j_val = aubin_J(phi_total, geom)
    scale = 2.0 * np.pi / geom.total_volume
    pair0 = np.dot(g.trapezoid_weights, h_pot * u0dd) + _tail(g, u0dd, h_pot)
    pair_phi = np.dot(g.trapezoid_weights, h_pot * dens) + _tail(g, dens, h_pot)
    return (-beta * (i_val - j_val) - scale * (pair0 - pair_phi)
            + _entropy(dens, u0dd, g, geom))


def mabuchi_difference(phi_total: RadialField, geom=REFERENCE, grid=None, params=None,
                       density=None) -> float:
    """``(1/V)[int f dV0 - int f dV_phi]`` with ``f = (1-beta) log(|s|^2/(eps^2+|s|^2))``.

    This equals ``M_twisted - M_log``.  ``f`` tends to the constant
    ``(1-beta) log(|s|^2/eps^2)`` slope near the poles, so the same
    exponential tail is added as in :func:`mabuchi_log`.
    """
    g = phi_total.grid
    dens = _density(phi_total, density, geom)
    rho = g.nodes
    s = geom.s_norm_sq(rho)
    f = -(1.0 - params.beta) * np.log1p(params.epsilon ** 2 / s)
    u0dd = geom.u0_d2(rho)
    scale = 2.0 * np.pi / geom.total_volume
    a = np.dot(g.trapezoid_weights, f * u0dd) + _tail(g, u0dd, f)
    b = np.dot(g.trapezoid_weights, f * dens) + _tail(g, dens, f)
    return float(scale * (a - b))


# ------------------------------------------------------------ along the flow

def twisted_ricci_potential(state, params=None, geom=None, grid=None) -> RadialField:
    """``u = phi_dot + c`` normalized so that ``(1/V) int e^(-u) dV_phi = 1``.

    The constant has the closed form ``c = log((1/V) int e^(-phi_dot) dV)``;
    it is evaluated on ``phi_dot - phi_dot[0]`` so that the exponentially
    growing constant mode never enters.
    """
    pr = state.problem
    shape = state.phi_dot_shape()
    c = _log_mean_exp(-shape, state.density, pr.grid, pr.geom)
    return RadialField(pr.grid, shape + c)


def normalization_residual(u: RadialField, state) -> float:
    pr = state.problem
    return abs(_log_mean_exp(-u.values, state.density, pr.grid, pr.geom))


def a_eps(u: RadialField, state, geom=None, grid=None, beta=None) -> float:
    """``(beta/V) int u e^(-u) dV``; nonpositive by Jensen."""
    pr = state.problem
    beta = pr.beta if beta is None else beta
    return beta * _mean(u.values * np.exp(-u.values), state.density, pr.grid, pr.geom)


def y_functional(state, geom=None, grid=None) -> float:
    """``Y = (1/V) int |d phi_dot|^2 dV = (2 pi / V) int (phi_dot')^2 drho``."""
    pr = state.problem
    return float(2.0 * np.pi * np.sum(state.rate ** 2) / pr.h / pr.geom.total_volume)


def gradient_norm_sq(state) -> float:
    """``||grad u||^2_{L^2} = int |grad phi_dot|^2 dV`` (un-normalized)."""
    return y_functional(state) * state.problem.geom.total_volume


def alpha_eps(state) -> float:
    """``(1/V) int phi_dot dV_phi``."""
    pr = state.problem
    volume = np.dot(pr.grid.trapezoid_weights, state.density)
    return float(np.dot(pr.grid.trapezoid_weights, state.phi_dot_shape() * state.density) / volume
                 + state.anchor_rate)


def _state_shape(state):
    """Potential relative to omega_0 with its first-node value removed, and that value."""
    pr = state.problem
    inc = state.total_increments
    base = state.anchor + pr.params.k * pr.chi[0]
    return RadialField(pr.grid, pr.nodes_from(0.0, inc)), base


def conservation_quantity(state, twist=None) -> float:
    """``M - beta F0 - (1/V) int phi_dot dV_phi``, evaluated without the constant mode.

    Writing the potential as ``Phi_0 + S`` the ``beta Phi_0`` terms of
    ``beta F0`` and of the mean of phi_dot cancel identically, so only
    ``S`` and the first-node forcing enter.
    """
    pr = state.problem
    shape, _ = _state_shape(state)
    if twist is None:
        twist = twist_ricci_potential_reference(pr.params, pr.geom, pr.grid)
    m = mabuchi_twisted(shape, pr.geom, params=pr.params, density=state.density, twist=twist)
    wts = pr.grid.trapezoid_weights
    f0_shape = ding_F0(shape, pr.geom)
    mean_rate = float(np.dot(wts, state.phi_dot_shape() * state.density) / np.dot(wts, state.density))
    forcing = state.anchor_rate - pr.beta * (state.anchor + pr.params.k * pr.chi[0])
    return m - pr.beta * f0_shape - mean_rate - forcing


# ------------------------------------------------------------ report

@dataclass
class FunctionalReport:
    t: float
    I: float
    J: float
    F0_func: float
    F_func: float
    mabuchi_twisted: float
    mabuchi_log: float
    Y: float
    a_eps: float
    alpha_eps: float
    u_eps: Optional[RadialField] = None

    CSV_COLUMNS = ("t", "I", "J", "F0", "F", "M_twisted", "M_log", "Y", "a_eps", "alpha_eps")

    def row(self):
        return (self.t, self.I, self.J, self.F0_func, self.F_func, self.mabuchi_twisted,
                self.mabuchi_log, self.Y, self.a_eps, self.alpha_eps)


def functional_report(state, twist=None) -> FunctionalReport:
    """Evaluate every functional on one flow snapshot."""
    pr = state.problem
    shape, base = _state_shape(state)
    if twist is None:
        twist = twist_ricci_potential_reference(pr.params, pr.geom, pr.grid)
    dens = state.density
    i_val = aubin_I(shape, pr.geom)
    j_val = aubin_J(shape, pr.geom)
    u = twisted_ricci_potential(state)
    return FunctionalReport(
        t=state.t, I=i_val, J=j_val,
        F0_func=ding_F0(shape, pr.geom, offset=base),
        F_func=ding_F(shape, pr.geom, twist=twist),
        mabuchi_twisted=mabuchi_twisted(shape, pr.geom, params=pr.params, density=dens, twist=twist),
        mabuchi_log=mabuchi_log(shape, pr.geom, beta=pr.beta, density=dens),
        Y=y_functional(state), a_eps=a_eps(u, state), alpha_eps=alpha_eps(state), u_eps=u)


# ------------------------------------------------------------ W functional

def _twisted_scalar_weighted(density, theta, geom):
    """``(R - tr theta) psi''`` from the density, without dividing by psi''."""
    g = density.grid
    ref = geom.u0_d2(g.nodes)
    log_ratio = RadialField(g, np.log(density.values / ref))
    return ref - second_derivative(log_ratio, order=4).values - theta


def w_functional(psi_dd: RadialField, f: RadialField, tau: float, theta, geom=REFERENCE,
                 grid=None, beta=None) -> float:
    """``int e^(-f) tau^(-n) (tau (R - tr theta + |grad f|^2) + beta f) dV``.

    ``psi_dd`` is the metric density and ``theta`` the twist density (array
    or field).  Every term is assembled against ``drho`` so that no
    quantity is divided by the small pole densities.
    """
    if tau <= 0.0:
        raise DomainError("tau must be positive")
    g = psi_dd.grid
    n = geom.n
    theta = theta.values if isinstance(theta, RadialField) else np.asarray(theta)
    weight = np.exp(-f.values) * tau ** (-n)
    d = np.diff(f.values) / g.spacing
    grad_sq_cells = d * d
    # cell values of (f')^2 moved to nodes by the trapezoid-consistent average
    grad_sq = np.empty(g.n_points)
    grad_sq[0], grad_sq[-1] = grad_sq_cells[0], grad_sq_cells[-1]
    grad_sq[1:-1] = 0.5 * (grad_sq_cells[1:] + grad_sq_cells[:-1])
    integrand = weight * (tau * (_twisted_scalar_weighted(psi_dd, theta, geom) + grad_sq)
                          + beta * f.values * psi_dd.values)
    return float(2.0 * np.pi * np.dot(g.trapezoid_weights, integrand))


def w_constraint(psi_dd: RadialField, f: RadialField, tau: float, geom=REFERENCE) -> float:
    """``(1/V) int e^(-f) tau^(-n) dV``, which the coupled system preserves."""
    g = psi_dd.grid
    return _mean(np.exp(-f.values) * tau ** (-geom.n), psi_dd.values, g, geom)


def tau_exact(tau0, beta, t):
    """Solution ``1 - (1 - tau0) e^(beta t)`` of ``tau' = beta (tau - 1)``."""
    return 1.0 - (1.0 - tau0) * np.exp(beta * t)


def coupled_w_evolve(state, f: RadialField, tau: float, dt: float, params=None, geom=None,
                     grid=None, later_state=None):
    """One step of the coupled (f, tau) system.

    In ``w = e^(-f)`` the f-equation becomes the linear backward heat
    equation ``w' = -Delta w + (R - tr theta - beta n / tau) w``, which is only
    well posed against the direction of time.  The step therefore goes from
    the later time to the earlier one: ``state`` is the metric at time ``t``,
    ``f`` and ``tau`` are given at ``t + dt`` (with ``later_state`` the metric
    there), and the return value is ``(f, tau)`` at ``t`` from one implicit
    Euler step.  ``tau`` is advanced with its exact solution.

    Returns
    -------
    (RadialField, float)
    """
    pr = state.problem
    beta, n = pr.beta, pr.geom.n
    if not 0.0 < tau < 1.0:
        raise DomainError(f"tau must stay in (0, 1), got {tau}")
    # tau(t) from tau(t + dt) by the exact flow of tau' = beta (tau - 1)
    tau_prev = 1.0 - (1.0 - tau) * np.exp(-beta * dt)
    if not 0.0 < tau_prev < 1.0:
        raise DomainError("tau left (0, 1)")
    metric = state
    dens = metric.density
    h = pr.h
    # R - tr theta = beta - Delta phi_dot along the flow; use it on cells to keep
    # the expression finite where psi'' is tiny
    lap_rate = neumann_laplacian(metric.rate, h)  # (phi_dot)'' at nodes
    potential = (beta - lap_rate / dens) - beta * n / tau_prev
    # implicit Euler in reversed time:  (I - dt Delta + dt V) w_prev = w_next
    # the Laplacian acts through increments; assemble the tridiagonal matrix
    c = 1.0 / (h * h * dens)
    m = pr.grid.n_points
    diag = np.empty(m)
    upper = np.empty(m - 1)
    lower = np.empty(m - 1)
    diag[:] = 1.0 + dt * potential
    diag[1:-1] += 2.0 * dt * c[1:-1]
    diag[0] += 2.0 * dt * c[0]
    diag[-1] += 2.0 * dt * c[-1]
    upper[:] = -dt * c[:-1]
    upper[0] *= 2.0
    lower[:] = -dt * c[1:]
    lower[-1] *= 2.0
    shift = np.min(f.values)
    w_next = np.exp(-(f.values - shift))
    _, _, _, w_prev, info = lapack.dgtsv(lower.copy(), diag.copy(), upper.copy(), w_next.copy())
    if info != 0 or np.any(w_prev <= 0.0):
        raise DomainError("backward heat step lost positivity")
    return RadialField(pr.grid, shift - np.log(w_prev)), float(tau_prev)
