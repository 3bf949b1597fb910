"""Runtime a-priori estimate monitors on flow snapshots.

Curvature-type quantities divide second differences by psi'', which is
about e^(-|rho|) near the poles; they are reported on
:func:`geometry.resolved_mask` only.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import curve_fit
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, LinearOperator, eigsh

from .errors import DomainError, IncompleteRunError, NumericError
from .functionals import twisted_ricci_potential
from .geometry import (REFERENCE, RadialField, meridian_diameter, resolved_mask,
                       second_derivative)
from .regularization import theta_eps_density


@dataclass
class MonitorSeries:
    """Time series of one monitored scalar with an optional bound.

    ``bound`` is ``(direction, threshold, active_from)`` with direction
    ``"upper"`` (value <= threshold) or ``"lower"`` (value >= threshold).
    """

    name: str
    times: np.ndarray
    values: np.ndarray
    bound: Optional[tuple] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.shape != self.values.shape:
            raise ValueError("times and values differ in length")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0.0):
            raise ValueError("monitor times must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"monitor {self.name} has non-finite values")
        if self.bound is not None:
            direction = self.bound[0]
            if direction not in ("upper", "lower"):
                raise ValueError(f"unknown bound direction {direction!r}")

    def margins(self):
        """Signed distance to the bound per sample (positive = satisfied); NaN when inactive."""
        if self.bound is None:
            return np.full(self.values.shape, np.nan)
        direction, threshold, start = self.bound
        m = threshold - self.values if direction == "upper" else self.values - threshold
        return np.where(self.times >= start, m, np.nan)

    def evaluate(self):
        """``(passed, worst_margin)``; vacuous series pass with margin inf."""
        m = self.margins()
        active = m[~np.isnan(m)]
        if active.size == 0:
            return True, float("inf")
        worst = float(active.min())
        return worst >= 0.0, worst

    def rows(self):
        """CSV rows ``(name, t, value, bound_ok)``."""
        m = self.margins()
        out = []
        for t, v, mi in zip(self.times, self.values, m):
            ok = "" if np.isnan(mi) else ("true" if mi >= 0.0 else "false")
            out.append((self.name, float(t), float(v), ok))
        return out


def _snapshots(run):
    snaps = getattr(run, "snapshots", run)
    if len(snaps) == 0:
        raise IncompleteRunError("run has no snapshots")
    return list(snaps)


# ------------------------------------------------------------ pointwise monitors

def twisted_scalar_weighted(state, theta=None):
    """``(R - tr theta) psi''``, assembled without dividing by psi''."""
    pr = state.problem
    ref = pr.u0dd
    if theta is None:
        theta = theta_eps_density(pr.params, pr.geom, pr.grid).values
    log_ratio = RadialField(pr.grid, np.log(state.density / ref))
    return ref - second_derivative(log_ratio, order=4).values - theta


def twisted_scalar(state, params=None, geom=None, grid=None, theta=None) -> RadialField:
    """``R - tr theta_eps`` pointwise.

    Near the poles the values are dominated by round-off; restrict to
    ``resolved_mask(state.psi_dd)`` before taking extrema.
    """
    return RadialField(state.grid, twisted_scalar_weighted(state, theta) / state.density)


def laplacian_equivalence(state, params=None, geom=None, grid=None) -> float:
    """Smallest ``A`` with ``omega_eps / A <= omega_phi <= A omega_eps`` on the grid."""
    ratio = state.density / state.problem.omega_eps
    return float(max(ratio.max(), 1.0 / ratio.min()))


def gradient_norm_sq_nodes(u: RadialField, density: np.ndarray) -> np.ndarray:
    """Riemannian ``|grad u|^2 = (u')^2 / (psi''/2)`` at nodes."""
    h = u.grid.spacing
    du = np.diff(u.values) / h
    cell = du * du / (0.25 * (density[1:] + density[:-1]))
    out = np.empty(u.values.size)
    out[0], out[-1] = cell[0], cell[-1]
    out[1:-1] = 0.5 * (cell[1:] + cell[:-1])
    return out


def calabi_s(state, geom=None, grid=None) -> RadialField:
    """Calabi's ``S = |Gamma_phi - Gamma_eps|^2_{omega_phi}``.

    In the z-chart ``g_{z zbar} = psi''/|z|^2`` and the Christoffel difference
    is ``d_z log(psi''/omega_eps) = ell'/z``; hence ``S = (ell')^2 / psi''``
    with ``ell = log(psi''/omega_eps)``.
    """
    pr = state.problem
    ell = np.log(state.density / pr.omega_eps)
    h = pr.h
    d = np.gradient(ell, h, edge_order=2)
    return RadialField(pr.grid, d * d / state.density)


def diameter(state) -> float:
    """Meridian (pole-to-pole) length."""
    return meridian_diameter(state.psi_dd)


def equatorial_length(state) -> float:
    """Length of the longest S^1 orbit, ``2 pi max sqrt(2 psi'')``."""
    return float(2.0 * np.pi * np.sqrt(2.0 * state.density.max()))


# ------------------------------------------------------------ Poincare eigenvalue

CONVENTIONS = ("kahler", "riemannian")


def poincare_eigenvalue(state, u: Optional[RadialField] = None, geom=None, grid=None,
                        convention: str = "kahler", density=None) -> float:
    """Lowest positive eigenvalue of ``L f = -f''/psi'' + (u'/psi'') f'`` on radial f.

    ``L`` is self-adjoint for the weight ``e^(-u) psi''``.  The discrete
    stiffness matrix divided by pole-sized masses has a condition number
    near 1e16, so the eigenvalue is taken as the reciprocal of the largest
    eigenvalue of the well-conditioned Green operator on mean-zero
    functions: fluxes are cumulative sums of the mass, increments follow by
    one division by the positive weight.

    ``convention="riemannian"`` scales by two (real Laplacian of the
    Riemannian metric).  ``state`` may be ``None`` when ``density`` is given.
    """
    if convention not in CONVENTIONS:
        raise DomainError(f"convention must be one of {CONVENTIONS}")
    if density is None:
        density = state.density
        g = state.grid
    else:
        density = density.values if isinstance(density, RadialField) else np.asarray(density)
        g = grid if grid is not None else u.grid
    if u is None:
        u = twisted_ricci_potential(state)
    h = g.spacing
    eu = np.exp(-(u.values - u.values.min()))
    cell = 0.5 * (eu[1:] + eu[:-1])
    mass = g.trapezoid_weights * eu * density
    root = np.sqrt(mass)
    total = mass.sum()

    def apply(y):
        x = y / root
        x = x - np.dot(mass, x) / total
        flux = -np.cumsum(mass * x)[:-1]
        f = np.concatenate(([0.0], np.cumsum(h * flux / cell)))
        f = f - np.dot(mass, f) / total
        return root * f

    op = LinearOperator((g.n_points, g.n_points), matvec=apply, dtype=float)
    start = root * np.tanh(g.nodes / 2.0)
    try:
        top = eigsh(op, k=1, which="LA", v0=start + 1e-3 * root, tol=1e-12,
                    return_eigenvectors=False, maxiter=5000)
    except (ArpackError, ArpackNoConvergence) as exc:
        raise NumericError(f"eigensolve failed: {exc}") from exc
    value = 1.0 / float(top[0])
    return 2.0 * value if convention == "riemannian" else value


# ------------------------------------------------------------ run-level checks

def _trend_slope(t, v):
    if len(t) < 2:
        return 0.0
    return float(np.polyfit(t, v, 1)[0])


def perelman_c1_series(run, t_min: float = 1.0, slope_tol: float = 1e-3):
    """Series of max|u|, max|grad u| and max|R - tr theta| for t >= t_min.

    Each series records the fitted linear slope in ``meta``; the bound is
    the plateau test ``slope <= slope_tol`` stored as an upper bound on the
    slope series ``<name>_slope``.
    """
    snaps = [s for s in _snapshots(run) if s.t >= t_min - 1e-12]
    if not snaps:
        raise IncompleteRunError(f"no snapshots at t >= {t_min}")
    theta = theta_eps_density(snaps[0].problem.params, snaps[0].problem.geom,
                              snaps[0].grid).values
    t, mu, mg, mr = [], [], [], []
    for s in snaps:
        u = twisted_ricci_potential(s)
        mask = resolved_mask(s.psi_dd)
        t.append(s.t)
        mu.append(np.max(np.abs(u.values)))
        mg.append(np.sqrt(np.max(gradient_norm_sq_nodes(u, s.density)[mask])))
        r = twisted_scalar_weighted(s, theta) / s.density
        mr.append(np.max(np.abs(r[mask])))
    out = []
    for name, vals in (("max_abs_u", mu), ("max_grad_u", mg), ("max_abs_twisted_scalar", mr)):
        slope = _trend_slope(t, vals)
        series = MonitorSeries(name, t, vals, None, {"slope": slope, "plateau": float(vals[-1])})
        out.append(series)
        out.append(MonitorSeries(name + "_slope", [t[-1]], [slope], ("upper", slope_tol, 0.0)))
    return out


def perelman_c1_check(run, t_min: float = 1.0, slope_tol: float = 1e-3):
    """Plateau check; returns the list of series from :func:`perelman_c1_series`."""
    return perelman_c1_series(run, t_min, slope_tol)


def fit_gradient_shape(pairs, slack: float = 0.0):
    """Smallest C with ``|grad u|^2 <= (1 + slack) C (u + C)`` for all (u, grad^2) pairs."""
    u = np.concatenate([p[0] for p in pairs])
    g2 = np.concatenate([p[1] for p in pairs])

    def ok(c):
        return np.all(g2 <= (1.0 + slack) * c * (u + c))

    lo, hi = 0.0, max(1.0, -2.0 * u.min())
    while not ok(hi):
        hi *= 2.0
        if hi > 1e12:
            raise NumericError("gradient shape constant diverged")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def gradient_shape_check(run, fit_window=(1.0, 2.0), slack: float = 0.1):
    """Fit ``|grad u|^2 <= C (u + C)`` on ``fit_window`` and test later snapshots.

    Returns ``(C, MonitorSeries)`` whose values are the worst ratio
    ``|grad u|^2 / (C (u + C))`` per snapshot after the window, bounded by
    ``1 + slack``.
    """
    data = []
    for s in _snapshots(run):
        u = twisted_ricci_potential(s)
        mask = resolved_mask(s.psi_dd)
        data.append((s.t, u.values[mask], gradient_norm_sq_nodes(u, s.density)[mask]))
    fit = [(u, g) for t, u, g in data if fit_window[0] - 1e-12 <= t <= fit_window[1] + 1e-12]
    if not fit:
        raise IncompleteRunError("no snapshots in the fit window")
    c = fit_gradient_shape(fit)
    later = [(t, np.max(g / (c * (u + c)))) for t, u, g in data if t > fit_window[1] + 1e-12]
    times = [t for t, _ in later]
    vals = [v for _, v in later]
    return c, MonitorSeries("gradient_shape_ratio", times, vals, ("upper", 1.0 + slack, 0.0),
                            {"C": c})


def twisted_scalar_series(run, beta, n=1, slack=0.05):
    """``min t^2 (R - tr theta)`` per snapshot with the lower bound ``-4n/beta - slack``."""
    snaps = _snapshots(run)
    theta = theta_eps_density(snaps[0].problem.params, snaps[0].problem.geom,
                              snaps[0].grid).values
    t, v = [], []
    for s in snaps:
        r = twisted_scalar_weighted(s, theta) / s.density
        mask = resolved_mask(s.psi_dd)
        t.append(s.t)
        v.append(s.t ** 2 * np.min(r[mask]))
    return MonitorSeries("t2_twisted_scalar_min", t, v, ("lower", -4.0 * n / beta - slack, 0.0))


def poincare_series(run, beta, t_min=1.0, slack=0.01, convention="kahler"):
    snaps = [s for s in _snapshots(run) if s.t >= t_min - 1e-12]
    t = [s.t for s in snaps]
    v = [poincare_eigenvalue(s, convention=convention) for s in snaps]
    threshold = beta - slack if convention == "kahler" else 2.0 * beta - slack
    return MonitorSeries("poincare_eigenvalue", t, v, ("lower", threshold, t_min))


def equivalence_series(run):
    snaps = _snapshots(run)
    return MonitorSeries("laplacian_equivalence", [s.t for s in snaps],
                         [laplacian_equivalence(s) for s in snaps])


def diameter_series(run):
    snaps = _snapshots(run)
    t = [s.t for s in snaps]
    return [MonitorSeries("meridian_diameter", t, [diameter(s) for s in snaps]),
            MonitorSeries("equatorial_length", t, [equatorial_length(s) for s in snaps])]


def calabi_series(run, half_width=5.0):
    snaps = _snapshots(run)
    w = snaps[0].grid.window(half_width)
    return MonitorSeries("calabi_s_window_max", [s.t for s in snaps],
                         [float(np.max(calabi_s(s).values[w])) for s in snaps])


def standard_monitors(run, beta):
    """All series recorded for a finished run."""
    out = [twisted_scalar_series(run, beta), equivalence_series(run), calabi_series(run)]
    out.extend(diameter_series(run))
    if any(s.t >= 1.0 for s in _snapshots(run)):
        out.append(poincare_series(run, beta))
        out.extend(perelman_c1_series(run))
    return out


# ------------------------------------------------------------ Holder exponent

def _holder_model(dist, pole, amp, alpha):
    return pole + amp * dist ** alpha


def holder_fit(phi_total: RadialField, geom=REFERENCE, grid=None, fraction: float = 0.2,
               pole_values=None):
    """Hölder exponent of ``phi`` at the poles in the omega_0 distance ``2 e^(-|rho|/2)``.

    Over the outer ``fraction`` of the grid at each end, ``phi`` is fitted
    by ``phi_pole + A dist^alpha`` (nonlinear least squares; the pole value
    is not a grid node).  ``r_squared`` is that of the log-log line of
    ``|phi - phi_pole|`` against ``dist`` at the fitted pole value.  With
    ``pole_values`` given the pole values are held fixed.

    Returns ``(alpha, r_squared)`` with alpha clamped to (0, 1]; the two
    ends are combined by taking the smaller exponent.
    """
    g = phi_total.grid
    rho = g.nodes
    m = max(8, int(round(fraction * g.n_points / 2)))
    ends = ((slice(0, m), 0), (slice(g.n_points - m, g.n_points), 1))
    alphas, r2s = [], []
    for sl, idx in ends:
        dist = 2.0 * np.exp(-np.abs(rho[sl]) / 2.0)
        vals = phi_total.values[sl]
        scale = max(np.ptp(vals), 1e-300)
        if scale < 1e-12:
            # flat end: nothing to fit, report the smooth cap
            alphas.append(1.0)
            r2s.append(1.0)
            continue
        if pole_values is not None:
            pole = pole_values[idx]
        else:
            interior = vals[np.argmax(dist)]
            edge = vals[np.argmin(dist)]
            guess = (edge, (interior - edge) / dist.max(), 1.0)
            try:
                (pole, amp, alpha), _ = curve_fit(_holder_model, dist / dist.max(), vals, p0=guess,
                                                  maxfev=20000)
            except RuntimeError:
                return 1.0, 0.0
        resid = np.abs(vals - pole)
        keep = resid > 1e-14 * max(scale, 1.0)
        if keep.sum() < 4:
            alphas.append(1.0)
            r2s.append(1.0)
            continue
        x = np.log(dist[keep])
        y = np.log(resid[keep])
        slope, icpt = np.polyfit(x, y, 1)
        pred = slope * x + icpt
        ss_res = np.sum((y - pred) ** 2)
        ss_tot = np.sum((y - y.mean()) ** 2)
        alphas.append(float(slope))
        r2s.append(float(1.0 - ss_res / ss_tot) if ss_tot > 0 else 1.0)
    alpha = min(alphas)
    alpha = float(min(max(alpha, np.finfo(float).tiny), 1.0))
    return alpha, float(min(r2s))
