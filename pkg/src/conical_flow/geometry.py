"""Rotationally symmetric model of CP^1 and the radial discrete calculus.

An S^1-invariant Kahler potential on CP^1 is a function psi(rho) of
rho = log|z|^2.  The conventions used everywhere in the package are

* Kahler form ``psi'' drho ^ dtheta`` and volume ``psi'' drho dtheta``,
* scalar curvature ``R = -(log psi'')'' / psi''``,
* trace of a twist with radial density ``q`` equal to ``q / psi''``,
* ``|grad f|^2 = (f')^2 / psi''`` and ``Delta f = f'' / psi''``,
* meridian length element ``sqrt(psi'' / 2) drho``.

The two poles rho = +-inf carry the divisor, so a truncated window
[-L, L] never touches it.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DegenerateMetricError, InvalidGridError, ShapeError

MIN_POINTS = 64
MIN_HALF_WIDTH = 20.0
DEFAULT_HALF_WIDTH = 30.0


@dataclass(frozen=True)
class RadialGrid:
    """Uniform node set ``{-L + i*h}`` symmetric about rho = 0.

    Parameters
    ----------
    rho_max : float
        Half width L of the window, at least 20.
    n_points : int
        Number of nodes, at least 64.
    """

    rho_max: float = DEFAULT_HALF_WIDTH
    n_points: int = 2048

    def __post_init__(self):
        if int(self.n_points) != self.n_points or self.n_points < 3:
            raise InvalidGridError(f"n_points must be an integer >= 3, got {self.n_points}")
        if self.n_points < MIN_POINTS:
            raise InvalidGridError(f"n_points must be >= {MIN_POINTS}, got {self.n_points}")
        if not np.isfinite(self.rho_max) or self.rho_max < MIN_HALF_WIDTH:
            raise InvalidGridError(f"rho_max must be >= {MIN_HALF_WIDTH}, got {self.rho_max}")
        object.__setattr__(self, "n_points", int(self.n_points))
        object.__setattr__(self, "rho_max", float(self.rho_max))

    @property
    def spacing(self) -> float:
        return 2.0 * self.rho_max / (self.n_points - 1)

    @cached_property
    def nodes(self) -> np.ndarray:
        # -L + i*h, mirrored so the node set is exactly symmetric
        i = np.arange(self.n_points)
        left = -self.rho_max + i * self.spacing
        right = self.rho_max - i[::-1] * self.spacing
        out = np.where(i < self.n_points // 2, left, right)
        out.setflags(write=False)
        return out

    @cached_property
    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.n_points, self.spacing)
        w[0] = w[-1] = 0.5 * self.spacing
        w.setflags(write=False)
        return w

    def window(self, half_width: float) -> np.ndarray:
        """Boolean mask of nodes with ``|rho| <= half_width``."""
        return np.abs(self.nodes) <= half_width + 1e-12

    @classmethod
    def for_schedule(cls, epsilon_min: float, n_points: int = 2048) -> "RadialGrid":
        """Grid with ``L = max(30, 4 ln(1/epsilon_min))``.

        The transition layer of the regularization sits near
        ``|rho| = 2 ln(1/epsilon)``, so this keeps it well inside the window.
        """
        half_width = DEFAULT_HALF_WIDTH
        if 0.0 < epsilon_min < 1.0:
            half_width = max(half_width, 4.0 * np.log(1.0 / epsilon_min))
        return cls(rho_max=half_width, n_points=n_points)


class RadialField:
    """Values of a radial function at the nodes of a grid."""

    __slots__ = ("grid", "values")

    def __init__(self, grid: RadialGrid, values):
        values = np.array(values, dtype=float)
        if values.ndim != 1 or values.shape[0] != grid.n_points:
            raise ShapeError(
                f"expected {grid.n_points} values, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        values.setflags(write=False)
        self.grid = grid
        self.values = values

    @classmethod
    def from_function(cls, grid, fn):
        return cls(grid, fn(grid.nodes))

    @classmethod
    def constant(cls, grid, value=0.0):
        return cls(grid, np.full(grid.n_points, float(value)))

    def _coerce(self, other):
        if isinstance(other, RadialField):
            _check_same_grid(self, other)
            return other.values
        return other

    def __add__(self, other):
        return RadialField(self.grid, self.values + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return RadialField(self.grid, self.values - self._coerce(other))

    def __rsub__(self, other):
        return RadialField(self.grid, self._coerce(other) - self.values)

    def __mul__(self, other):
        return RadialField(self.grid, self.values * self._coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return RadialField(self.grid, self.values / self._coerce(other))

    def __neg__(self):
        return RadialField(self.grid, -self.values)

    def __len__(self):
        return self.grid.n_points

    def __repr__(self):
        return f"RadialField(n={self.grid.n_points}, L={self.grid.rho_max})"


def _check_same_grid(a: RadialField, b: RadialField):
    if a.grid != b.grid:
        raise ShapeError("fields are defined on different grids")


@dataclass(frozen=True)
class ReferenceGeometry:
    """Fubini-Study model of CP^1 with the two poles as divisor.

    ``u0 = 2 log(1 + e^rho)`` gives total volume 4 pi; the section
    ``s = z d/dz`` has ``|s|_h^2 = e^rho / (1 + e^rho)^2``.  The reference
    metric is Kahler-Einstein, so its twisted Ricci potential ``F0`` is 0.
    """

    n: int = 1

    F0: float = 0.0

    @property
    def total_volume(self) -> float:
        return 4.0 * np.pi

    # closed forms in rho, written to keep relative accuracy in the tails
    @staticmethod
    def u0(rho):
        return 2.0 * np.logaddexp(0.0, rho)

    @staticmethod
    def u0_d1(rho):
        return 2.0 / (1.0 + np.exp(-np.asarray(rho, dtype=float)))

    @staticmethod
    def u0_d2(rho):
        e = np.exp(-np.abs(np.asarray(rho, dtype=float)))
        return 2.0 * e / (1.0 + e) ** 2

    @staticmethod
    def s_norm_sq(rho):
        e = np.exp(-np.abs(np.asarray(rho, dtype=float)))
        return e / (1.0 + e) ** 2

    @staticmethod
    def s_norm_sq_d1(rho):
        rho = np.asarray(rho, dtype=float)
        return -ReferenceGeometry.s_norm_sq(rho) * np.tanh(0.5 * rho)

    @staticmethod
    def s_norm_sq_d2(rho):
        rho = np.asarray(rho, dtype=float)
        s = ReferenceGeometry.s_norm_sq(rho)
        return s * (np.tanh(0.5 * rho) ** 2 - 2.0 * s)

    @staticmethod
    def log_s_norm_sq(rho):
        rho = np.asarray(rho, dtype=float)
        return rho - 2.0 * np.logaddexp(0.0, rho)

    def potential(self, grid: RadialGrid) -> RadialField:
        return RadialField(grid, self.u0(grid.nodes))

    def density(self, grid: RadialGrid) -> RadialField:
        """Metric density ``u0''`` of the reference form."""
        return RadialField(grid, self.u0_d2(grid.nodes))

    def divisor_norm(self, grid: RadialGrid) -> RadialField:
        return RadialField(grid, self.s_norm_sq(grid.nodes))


REFERENCE = ReferenceGeometry()


# ---------------------------------------------------------------- calculus

def _second_difference(f, h, order):
    n = f.shape[0]
    out = np.empty_like(f)
    if order == 2:
        out[1:-1] = f[2:] - 2.0 * f[1:-1] + f[:-2]
        out[0] = 2.0 * f[0] - 5.0 * f[1] + 4.0 * f[2] - f[3]
        out[-1] = 2.0 * f[-1] - 5.0 * f[-2] + 4.0 * f[-3] - f[-4]
        return out / h ** 2
    if order == 4:
        if n < 6:
            raise InvalidGridError("fourth-order stencil needs at least 6 nodes")
        out[2:-2] = (-f[4:] + 16.0 * f[3:-1] - 30.0 * f[2:-2]
                     + 16.0 * f[1:-3] - f[:-4]) / 12.0
        one_sided = np.array([45.0, -154.0, 214.0, -156.0, 61.0, -10.0]) / 12.0
        near = np.array([10.0, -15.0, -4.0, 14.0, -6.0, 1.0]) / 12.0
        out[0] = one_sided @ f[:6]
        out[1] = near @ f[:6]
        out[-1] = one_sided @ f[-1:-7:-1]
        out[-2] = near @ f[-1:-7:-1]
        return out / h ** 2
    raise ValueError(f"unsupported stencil order {order}")


def second_derivative(field: RadialField, order: int = 2) -> RadialField:
    """Second derivative in rho by finite differences.

    Central differences in the interior and one-sided stencils of the same
    order at the boundary nodes.  ``order`` is 2 (default) or 4.
    """
    if field.grid.n_points < 3:
        raise InvalidGridError("second derivative needs at least 3 nodes")
    return RadialField(field.grid, _second_difference(field.values, field.grid.spacing, order))


def first_derivative(field: RadialField) -> RadialField:
    """Second-order accurate first derivative (one-sided at the ends)."""
    f, h = field.values, field.grid.spacing
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - f[:-2]) / (2.0 * h)
    out[0] = (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * h)
    out[-1] = (3.0 * f[-1] - 4.0 * f[-2] + f[-3]) / (2.0 * h)
    return RadialField(field.grid, out)


def neumann_laplacian(increments: np.ndarray, h: float) -> np.ndarray:
    """Node second differences from the ``n-1`` increments ``f[i+1] - f[i]``.

    Mirror ghosts impose f' = 0 at both ends.  Working from increments keeps
    relative accuracy where f is nearly constant, which is the whole tail
    of the window.  The trapezoid sum of the result is exactly zero.
    """
    d = np.asarray(increments, dtype=float)
    out = np.empty(d.shape[0] + 1)
    out[0] = 2.0 * d[0]
    out[1:-1] = d[1:] - d[:-1]
    out[-1] = -2.0 * d[-1]
    return out / h ** 2


def integrate(field: RadialField, weight: RadialField) -> float:
    """``2 pi * trapezoid(field * weight)`` over the window."""
    if not isinstance(field, RadialField) or not isinstance(weight, RadialField):
        raise ShapeError("integrate expects two RadialField arguments")
    _check_same_grid(field, weight)
    return float(2.0 * np.pi * np.dot(field.grid.trapezoid_weights,
                                      field.values * weight.values))


def _require_positive(density: RadialField):
    if np.any(density.values <= 0.0):
        i = int(np.argmin(density.values))
        raise DegenerateMetricError(
            f"metric density is nonpositive at rho={density.grid.nodes[i]:.6g} "
            f"(value {density.values[i]:.3e})")


def scalar_curvature(density: RadialField, geom: ReferenceGeometry = REFERENCE) -> RadialField:
    """Scalar curvature of the metric with density ``psi''``.

    Evaluated through the reference metric,
    ``R = (u0'' - (log(psi''/u0''))'') / psi''``, which is algebraically
    ``-(log psi'')''/psi''`` because ``(log u0'')'' = -u0''``.  Differencing
    the bounded ratio instead of ``log psi''`` removes the large linear part
    of ``log psi''`` from the stencil.
    """
    _require_positive(density)
    ref = geom.u0_d2(density.grid.nodes)
    log_ratio = RadialField(density.grid, np.log(density.values / ref))
    d2 = second_derivative(log_ratio, order=4).values
    return RadialField(density.grid, (ref - d2) / density.values)


def resolved_mask(density: RadialField, tolerance: float = 1e-6) -> np.ndarray:
    """Nodes where second differences divided by ``psi''`` are trustworthy.

    A second difference of O(1) data carries round-off of roughly
    ``16 eps / h^2``; dividing by psi'' amplifies it.  Curvature-type
    quantities are only meaningful where that amplified round-off stays
    below ``tolerance``.  Near the poles psi'' decays like e^(-|rho|) and the
    mask excludes a few units of rho at each end.
    """
    h = density.grid.spacing
    noise = 16.0 * np.finfo(float).eps / (h ** 2 * np.abs(density.values))
    return noise <= tolerance


def meridian_diameter(density: RadialField) -> float:
    """Pole-to-pole meridian length ``int sqrt(psi''/2) drho`` over the window."""
    _require_positive(density)
    return float(np.dot(density.grid.trapezoid_weights, np.sqrt(0.5 * density.values)))
