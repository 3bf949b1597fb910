"""Regularized objects: the smoothing function chi, omega_eps, theta_eps.

Everything is tabulated in the radial chart.  With ``sigma = |s|_h^2`` the
smoothing function is

    chi(eps^2 + sigma) = (1/beta) int_0^sigma ((eps^2 + r)^beta - eps^(2 beta)) / r dr

and ``omega_eps = omega_0 + k i ddbar chi``.  Second derivatives in rho are
taken analytically through the chain rule, never by differencing the
quadrature.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate as spi

from .errors import ConfigurationError, ConventionError, DomainError, DegenerateMetricError
from .geometry import REFERENCE, RadialField, RadialGrid, ReferenceGeometry, second_derivative

SEMIPOSITIVE_TOL = 1e-10
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(10)


@dataclass(frozen=True)
class RegularizationParams:
    """Cone parameter and regularization scale.

    ``epsilon = 0`` selects the conical limit (closed forms) and ``k = 0``
    switches the smoothing term off; both are degenerate cases used by
    diagnostics, the flow requires ``epsilon > 0``.
    """

    beta: float
    epsilon: float
    k: float
    gamma_target: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise DomainError(f"beta must lie in (0, 1), got {self.beta}")
        if not self.epsilon >= 0.0:
            raise DomainError(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.k >= 0.0:
            raise DomainError(f"k must be >= 0, got {self.k}")
        if not 0.0 < self.gamma_target < 1.0:
            raise DomainError(f"gamma_target must lie in (0, 1), got {self.gamma_target}")

    def with_epsilon(self, epsilon):
        return RegularizationParams(self.beta, epsilon, self.k, self.gamma_target)


def _check_beta(beta):
    if not 0.0 < beta < 1.0:
        raise DomainError(f"beta must lie in (0, 1), got {beta}")


# ------------------------------------------------------------ chi and derivatives

def _chi_integrand(r, beta, eps2):
    """``((eps^2 + r)^beta - eps^(2 beta)) / r`` with its limit at r = 0."""
    r = np.asarray(r, dtype=float)
    x = r / eps2
    with np.errstate(invalid="ignore", divide="ignore"):
        val = eps2 ** beta * np.expm1(beta * np.log1p(x)) / r
    return np.where(r > 0.0, val, beta * eps2 ** (beta - 1.0))


def chi_eval(beta: float, epsilon: float, t: float) -> float:
    """Smoothing function ``chi(epsilon^2 + t)`` by adaptive quadrature.

    Parameters
    ----------
    beta : float
        Cone parameter in (0, 1).
    epsilon : float
        Regularization scale; 0 gives the closed form ``t^beta / beta^2``.
    t : float
        Upper limit, must be >= 0.
    """
    _check_beta(beta)
    if t < 0.0:
        raise DomainError(f"chi is defined for t >= 0, got {t}")
    if t == 0.0:
        return 0.0
    if epsilon == 0.0:
        return t ** beta / beta ** 2
    # r = eps^2 x gives eps^(2 beta) / beta * int_0^(t/eps^2) ((1+x)^beta - 1)/x dx;
    # the part x > 1 is integrated in s = log x, where the integrand is smooth
    eps2 = epsilon * epsilon
    upper = t / eps2
    g = lambda x: float(_chi_integrand(x, beta, 1.0))
    val, _ = spi.quad(g, 0.0, min(upper, 1.0), epsabs=1e-14, epsrel=1e-12, limit=200)
    if upper > 1.0:
        tail, _ = spi.quad(lambda s: g(np.exp(s)) * np.exp(s), 0.0, np.log(upper),
                           epsabs=1e-14, epsrel=1e-12, limit=200)
        val += tail
    return eps2 ** beta * val / beta


def chi_values(beta, epsilon, sigma) -> np.ndarray:
    """Vectorized :func:`chi_eval` over an array of ``sigma`` values."""
    sigma = np.asarray(sigma, dtype=float)
    if epsilon == 0.0:
        return sigma ** beta / beta ** 2
    return np.array([chi_eval(beta, epsilon, float(t)) for t in sigma.ravel()]).reshape(sigma.shape)


def chi_t(beta, epsilon, sigma):
    """First derivative of chi with respect to its argument shift t."""
    sigma = np.asarray(sigma, dtype=float)
    if epsilon == 0.0:
        return sigma ** (beta - 1.0) / beta
    eps2 = epsilon * epsilon
    x = sigma / eps2
    small = x < 1e-4
    xs = np.where(small, 1.0, x)
    big = np.expm1(beta * np.log1p(xs)) / (beta * xs)
    # series of ((1+x)^beta - 1) / (beta x)
    c2 = (beta - 1.0) / 2.0
    c3 = (beta - 1.0) * (beta - 2.0) / 6.0
    ser = 1.0 + c2 * x + c3 * x * x
    return eps2 ** (beta - 1.0) * np.where(small, ser, big)


def chi_tt(beta, epsilon, sigma):
    """Second derivative of chi with respect to t."""
    sigma = np.asarray(sigma, dtype=float)
    if epsilon == 0.0:
        return (beta - 1.0) * sigma ** (beta - 2.0) / beta
    eps2 = epsilon * epsilon
    x = sigma / eps2
    small = x < 1e-3
    xs = np.where(small, 1.0, x)
    num = beta * xs * (1.0 + xs) ** (beta - 1.0) - np.expm1(beta * np.log1p(xs))
    big = num / (beta * xs * xs)
    # x f'(x) - (f(x) - 1) = sum (m-1) c_m x^m for f = (1+x)^beta
    c = [1.0, beta]
    for m in range(2, 6):
        c.append(c[-1] * (beta - m + 1) / m)
    ser = (c[2] + 2.0 * c[3] * x + 3.0 * c[4] * x ** 2 + 4.0 * c[5] * x ** 3) / beta
    return eps2 ** (beta - 2.0) * np.where(small, ser, big)


@lru_cache(maxsize=64)
def _chi_nodes(beta, epsilon, grid):
    # one adaptive quadrature at the end node, then exact cell increments;
    # the right half is the mirror image since |s|^2 is even in rho
    n = grid.n_points
    half = (n + 1) // 2
    s0 = float(REFERENCE.s_norm_sq(grid.nodes[0]))
    left = chi_eval(beta, epsilon, s0) + np.concatenate(
        ([0.0], np.cumsum(_chi_increments(beta, epsilon, grid)[:half - 1])))
    out = np.empty(n)
    out[:half] = left
    out[n - half:] = left[::-1]
    out.setflags(write=False)
    return out


@lru_cache(maxsize=64)
def _chi_increments(beta, epsilon, grid):
    s = REFERENCE.s_norm_sq(grid.nodes)
    a, b = s[:-1], s[1:]
    if epsilon == 0.0:
        out = (b ** beta - a ** beta) / beta ** 2
    else:
        # fixed Gauss-Legendre on [s_i, s_i+1]; the cell is narrow compared
        # with the scale eps^2 on which the integrand varies
        half = 0.5 * (b - a)
        mid = 0.5 * (b + a)
        r = mid[:, None] + half[:, None] * _GL_NODES[None, :]
        vals = _chi_integrand(r, beta, epsilon * epsilon)
        out = half * (vals @ _GL_WEIGHTS) / beta
    out.setflags(write=False)
    return out


def chi_field(beta, epsilon, grid: RadialGrid) -> RadialField:
    """``chi(eps^2 + |s|^2)`` at the nodes."""
    return RadialField(grid, _chi_nodes(float(beta), float(epsilon), grid))


def chi_increments(beta, epsilon, grid: RadialGrid) -> np.ndarray:
    """``chi[i+1] - chi[i]`` computed cell by cell, accurate to relative round-off."""
    return _chi_increments(float(beta), float(epsilon), grid)


def chi_rho_derivatives(beta, epsilon, grid: RadialGrid, geom: ReferenceGeometry = REFERENCE):
    """First and second rho-derivatives of ``chi(eps^2 + |s|^2)``."""
    rho = grid.nodes
    s, s1, s2 = geom.s_norm_sq(rho), geom.s_norm_sq_d1(rho), geom.s_norm_sq_d2(rho)
    ct = chi_t(beta, epsilon, s)
    d1 = ct * s1
    d2 = chi_tt(beta, epsilon, s) * s1 * s1 + ct * s2
    return d1, d2


# ------------------------------------------------------------ forms

def omega_eps_density(params: RegularizationParams, geom: ReferenceGeometry = REFERENCE,
                      grid: RadialGrid = None, check: bool = True) -> RadialField:
    """Density of ``omega_eps = omega_0 + k i ddbar chi`` on the grid.

    Raises
    ------
    DegenerateMetricError
        If the density is nonpositive somewhere (k too large).
    """
    u0dd = geom.u0_d2(grid.nodes)
    if params.k == 0.0:
        return RadialField(grid, u0dd)
    _, chi_dd = chi_rho_derivatives(params.beta, params.epsilon, grid, geom)
    dens = u0dd + params.k * chi_dd
    if check and np.any(dens <= 0.0):
        raise DegenerateMetricError(
            f"omega_eps is not positive for k={params.k}; choose a smaller k")
    return RadialField(grid, dens)


def conical_density(beta, k, grid: RadialGrid, geom: ReferenceGeometry = REFERENCE) -> RadialField:
    """Density of ``omega_0 + k i ddbar |s|^(2 beta) / beta^2`` (the eps = 0 limit)."""
    rho = grid.nodes
    s = geom.s_norm_sq(rho)
    tanh2 = np.tanh(0.5 * rho) ** 2
    return RadialField(grid, geom.u0_d2(rho) + (k / beta) * s ** beta * (beta * tanh2 - 2.0 * s))


def select_k(geom: ReferenceGeometry, grid: RadialGrid, beta: float, epsilon_schedule,
             gamma_target: float = 0.5, tol: float = 1e-3) -> float:
    """Largest k in (0, 1] with ``omega_eps >= gamma * omega_0`` for every scheduled eps.

    Bisection to absolute accuracy ``tol``; when the admissible range is
    below ``tol`` the search continues until the bracket is resolved
    relative to its upper end.

    Raises
    ------
    ConfigurationError
        If no k >= 1e-6 is admissible.
    """
    _check_beta(beta)
    schedule = [float(e) for e in epsilon_schedule]
    if not schedule:
        raise ConfigurationError("epsilon schedule is empty")
    u0dd = geom.u0_d2(grid.nodes)
    ratios = [chi_rho_derivatives(beta, e, grid, geom)[1] / u0dd for e in schedule]

    def admissible(k):
        return all(np.min(1.0 + k * r) >= gamma_target for r in ratios)

    if admissible(1.0):
        return 1.0
    lo, hi = 0.0, 1.0
    while True:
        mid = 0.5 * (lo + hi)
        if admissible(mid):
            lo = mid
        else:
            hi = mid
        if lo > 0.0 and hi - lo <= tol * min(1.0, 2.0 * lo):
            break
        if hi < 1e-6:
            raise ConfigurationError(
                f"no admissible k >= 1e-6 for gamma_target={gamma_target}")
    if lo < 1e-6:
        raise ConfigurationError(f"no admissible k >= 1e-6 for gamma_target={gamma_target}")
    return lo


def theta_eps_density(params: RegularizationParams, geom: ReferenceGeometry = REFERENCE,
                      grid: RadialGrid = None) -> RadialField:
    """Density of ``(1 - beta)(omega_0 + i ddbar log(eps^2 + |s|^2))``.

    With ``w = |s|^2 / (eps^2 + |s|^2)`` the density is
    ``(1 - beta)(1 - w)(2|s|^2 + w tanh^2(rho/2))``, manifestly >= 0.

    Raises
    ------
    ConventionError
        If any value is below ``-1e-10``.
    """
    rho = grid.nodes
    s = geom.s_norm_sq(rho)
    eps2 = params.epsilon ** 2
    w = s / (eps2 + s)
    one_minus_w = eps2 / (eps2 + s)
    dens = (1.0 - params.beta) * one_minus_w * (2.0 * s + w * np.tanh(0.5 * rho) ** 2)
    if np.any(dens < -SEMIPOSITIVE_TOL):
        raise ConventionError("theta_eps density is negative")
    return RadialField(grid, dens)


def twist_potential(params: RegularizationParams, geom: ReferenceGeometry = REFERENCE,
                    grid: RadialGrid = None) -> RadialField:
    """``F0 + (1 - beta) log(eps^2 + |s|^2)``, the zeroth-order part of the flow."""
    rho = grid.nodes
    eps2 = params.epsilon ** 2
    if eps2 == 0.0:
        logs = geom.log_s_norm_sq(rho)
    else:
        logs = np.log(eps2 + geom.s_norm_sq(rho))
    return RadialField(grid, geom.F0 + (1.0 - params.beta) * logs)


def twist_potential_increments(params, geom=REFERENCE, grid=None) -> np.ndarray:
    """Nodal increments of :func:`twist_potential`, free of cancellation."""
    s = geom.s_norm_sq(grid.nodes)
    eps2 = params.epsilon ** 2
    return (1.0 - params.beta) * np.log1p((s[1:] - s[:-1]) / (eps2 + s[:-1]))


def ricci_potential_eps(params, geom=REFERENCE, grid=None) -> RadialField:
    """``F_eps = F0 + log((omega_eps/omega_0) (eps^2 + |s|^2)^(1 - beta))``."""
    dens = omega_eps_density(params, geom, grid)
    return RadialField(grid, np.log(dens.values / geom.u0_d2(grid.nodes))
                       + twist_potential(params, geom, grid).values)


# ------------------------------------------------------------ barrier identity

def chi_rho_identity_sides(rho_exp, epsilon, beta=None, geom=REFERENCE, grid=None,
                           normalization="derived"):
    """Both sides of the ddbar identity for the barrier ``chi_rho``.

    Left side: quadrature of ``chi_rho`` at the nodes followed by
    :func:`second_derivative`.  Right side:
    ``(eps^2+|s|^2)^(rho-1) <D's,D's> - c ((eps^2+|s|^2)^rho - e) omega_0``
    where the <D's,D's> density is ``(|s|^2)'^2 / |s|^2``.

    ``normalization="derived"`` uses ``c = 1/rho, e = eps^(2 rho)`` (what the
    chain rule gives); ``"as_printed"`` uses ``c = 1/beta, e = eps^2``.
    """
    if not 0.0 < rho_exp < 1.0:
        raise DomainError(f"rho_exp must lie in (0, 1), got {rho_exp}")
    rho = grid.nodes
    s = geom.s_norm_sq(rho)
    lhs = second_derivative(chi_field(rho_exp, epsilon, grid)).values
    base = epsilon ** 2 + s
    dsds = geom.s_norm_sq_d1(rho) ** 2 / s
    if normalization == "derived":
        coef, shift = 1.0 / rho_exp, epsilon ** (2.0 * rho_exp)
        bracket = shift * np.expm1(rho_exp * np.log1p(s / epsilon ** 2))
    elif normalization == "as_printed":
        if beta is None:
            raise DomainError("as_printed normalization needs beta")
        coef, shift = 1.0 / beta, epsilon ** 2
        bracket = base ** rho_exp - shift
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    rhs = base ** (rho_exp - 1.0) * dsds - coef * bracket * geom.u0_d2(rho)
    return lhs, rhs


def chi_rho_identity_residual(rho_exp, epsilon, geom=REFERENCE, grid=None, beta=None,
                              normalization="derived") -> float:
    """Max-norm residual between the two sides of the barrier identity."""
    lhs, rhs = chi_rho_identity_sides(rho_exp, epsilon, beta, geom, grid, normalization)
    return float(np.max(np.abs(lhs - rhs)))


def barrier_normalization_report(rho_exp, epsilon, beta, geom=REFERENCE, grid=None) -> dict:
    """Residuals of both normalizations and which one the numerics support."""
    derived = chi_rho_identity_residual(rho_exp, epsilon, geom, grid, beta, "derived")
    printed = chi_rho_identity_residual(rho_exp, epsilon, geom, grid, beta, "as_printed")
    return {"derived": derived, "as_printed": printed,
            "matches": "derived" if derived <= printed else "as_printed"}


# ------------------------------------------------------------ cone chart

def cone_chart_coefficient(beta, epsilon, polar_radius, phi_value):
    """Metric coefficient of the regularized cone in the chart of the map Psi_eps.

    ``(eps^2 + (eps^(2b) + r^2)^(1/b - 1) r^2 e^(-phi))^(b - 1) (eps^(2b) + r^2)^(1/b - 1)``
    with ``b = beta`` and ``r = polar_radius``.  Accepts arrays.

    With ``t = eps^(2b) / (eps^(2b) + r^2)`` the expression equals
    ``(t^(1/b) + (1 - t) e^(-phi))^(b - 1)`` exactly; that form is evaluated,
    so eps cancels and ``r = 0`` gives exactly ``e^0 = 1`` at ``phi = 0``.
    """
    if not 0.0 < beta < 1.0:
        raise DomainError(f"beta must lie in (0, 1), got {beta}")
    r = np.asarray(polar_radius, dtype=float)
    if np.any(r < 0.0):
        raise DomainError("polar_radius must be >= 0")
    a = np.asarray(epsilon, dtype=float) ** (2.0 * beta)
    base = a + r * r
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(base > 0.0, a / base, 1.0)
    out = (t ** (1.0 / beta) + (1.0 - t) * np.exp(-np.asarray(phi_value, dtype=float))) ** (beta - 1.0)
    return out if out.ndim else float(out)


def cone_chart_bounds(beta, c):
    """Lower and upper bounds of the coefficient for ``|phi| <= c``."""
    lower = (1.0 + np.exp(c)) ** (beta - 1.0)
    upper = 2.0 ** ((1.0 / beta - 1.0) * (1.0 - beta)) * np.exp(c * (1.0 - beta))
    return float(lower), float(upper)
