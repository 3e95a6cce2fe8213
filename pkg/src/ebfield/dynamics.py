"""Parametrized mean models ("spatial dynamics").

A dynamics model defines the GP mean at the measurement points as the
solution of residual equations ``F_i(mu; gamma) = 0`` where each ``F_i``
only involves ``mu_j`` for ``j`` in a small neighborhood of ``i``.

Two families ship:

* :class:`Poisson1D` -- the stationary heat equation ``mu'' = w(s; gamma)``
  on a bar with Dirichlet ends, discretized by central differences.
* :class:`NaturalSpline` -- a natural cubic spline through values ``gamma``
  at a subset of the sensors (mean explicit and linear in ``gamma``).
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_banded

from .errors import InvalidInputError
from .kernel import _as_points


@dataclass(frozen=True)
class Hyperparameters:
    values: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        lo = np.broadcast_to(np.asarray(self.lower, dtype=float), v.shape).copy()
        hi = np.broadcast_to(np.asarray(self.upper, dtype=float), v.shape).copy()
        if np.any(lo > hi):
            raise InvalidInputError("lower bound exceeds upper bound")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def within_bounds(self) -> bool:
        return bool(np.all(self.values >= self.lower) and np.all(self.values <= self.upper))

    def clip(self, values) -> np.ndarray:
        return np.clip(np.asarray(values, dtype=float), self.lower, self.upper)

    def with_values(self, values) -> "Hyperparameters":
        return Hyperparameters(values, self.lower, self.upper)


def _as_1d_locations(locations) -> np.ndarray:
    pts = _as_points(locations)
    if pts.shape[1] != 1:
        raise InvalidInputError(
            f"shipped dynamics are one-dimensional, got locations of dimension {pts.shape[1]}")
    return pts[:, 0].copy()


class SpatialDynamics(ABC):
    """Behavioral contract shared by every mean model."""

    #: True when mu is an explicit function of gamma (each F_i involves mu_i only)
    explicit: bool = False
    #: True when mu depends linearly on gamma
    linear: bool = False
    locations: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @property
    def n(self) -> int:
        return self.locations.shape[0]

    @property
    @abstractmethod
    def n_params(self) -> int: ...

    def hyperparameters(self, values) -> Hyperparameters:
        shape = np.shape(values)
        if shape != (self.n_params,):
            raise InvalidInputError(f"expected {self.n_params} hyperparameters, got shape {shape}")
        return Hyperparameters(values, self.lower, self.upper)

    @abstractmethod
    def residual(self, mu, gamma) -> np.ndarray: ...

    @abstractmethod
    def solve_mean(self, gamma) -> np.ndarray: ...

    @abstractmethod
    def mean_jacobian(self, gamma) -> np.ndarray: ...

    @abstractmethod
    def regression_mean(self, gamma, grid) -> np.ndarray: ...

    @abstractmethod
    def mean_neighbors(self, i: int) -> list[int]:
        """Indices j whose mu_j enter F_i (including i)."""


# --------------------------------------------------------------------------
# Poisson / stationary heat equation
# --------------------------------------------------------------------------


def _source_terms(s, gamma):
    """Heat source w = -A w^2 sin(w s + phi) and its partials in (A, w, phi)."""
    a, om, ph = (float(g) for g in gamma)
    arg = om * s + ph
    sn, cs = np.sin(arg), np.cos(arg)
    w = -a * om * om * sn
    dw = np.stack([-om * om * sn,
                   -2.0 * a * om * sn - a * om * om * s * cs,
                   -a * om * om * cs], axis=-1)
    return w, dw


class Poisson1D(SpatialDynamics):
    """Central-difference Poisson problem on uniformly spaced sensors.

    Residuals are ``mu_1 - w_1``, ``mu_N - w_N`` at the ends and
    ``(mu_{i+1} - 2 mu_i + mu_{i-1}) / eps^2 - w(s_i; gamma)`` inside, with
    ``gamma = (A, omega, phi)``.
    """

    explicit = False
    linear = False
    param_names = ("A", "omega", "phi")

    def __init__(self, locations, boundary=(3.0, 0.0), lower=(0.0, 0.1, -np.pi),
                 upper=(20.0, 10.0, np.pi), rtol: float = 1e-9):
        s = _as_1d_locations(locations)
        if s.size < 3:
            raise InvalidInputError("Poisson1D needs at least 3 measurement points")
        steps = np.diff(s)
        eps = (s[-1] - s[0]) / (s.size - 1)
        if eps <= 0 or np.any(np.abs(steps - eps) > rtol * abs(eps)):
            raise InvalidInputError("Poisson1D needs strictly increasing, uniformly spaced locations")
        self.locations = s
        self.spacing = float(eps)
        self.boundary = (float(boundary[0]), float(boundary[1]))
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        n = s.size
        ab = np.zeros((3, n))
        ab[0, 2:] = 1.0          # super-diagonal, interior rows
        ab[1, :] = -2.0
        ab[1, 0] = ab[1, -1] = 1.0
        ab[2, :-2] = 1.0         # sub-diagonal, interior rows
        self._banded = ab

    @property
    def n_params(self) -> int:
        return 3

    def source(self, s, gamma):
        return _source_terms(np.asarray(s, dtype=float), gamma)[0]

    def residual(self, mu, gamma) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        if mu.shape != (self.n,):
            raise InvalidInputError(f"mu must have length {self.n}")
        w = self.source(self.locations, gamma)
        out = np.empty(self.n)
        out[0] = mu[0] - self.boundary[0]
        out[-1] = mu[-1] - self.boundary[1]
        out[1:-1] = (mu[2:] - 2.0 * mu[1:-1] + mu[:-2]) / self.spacing ** 2 - w[1:-1]
        return out

    def _rhs(self, gamma) -> np.ndarray:
        b = self.spacing ** 2 * self.source(self.locations, gamma)
        b[0], b[-1] = self.boundary
        return b

    def solve_mean(self, gamma) -> np.ndarray:
        mu = solve_banded((1, 1), self._banded, self._rhs(gamma))
        # boundary rows are identities; undo pivoting round-off there
        mu[0], mu[-1] = self.boundary
        return mu

    def mean_jacobian(self, gamma) -> np.ndarray:
        _, dw = _source_terms(self.locations, gamma)
        db = self.spacing ** 2 * dw
        db[0, :] = 0.0
        db[-1, :] = 0.0
        jac = solve_banded((1, 1), self._banded, db)
        jac[0, :] = jac[-1, :] = 0.0
        return jac

    def mean_neighbors(self, i: int) -> list[int]:
        if i in (0, self.n - 1):
            return [i]
        return [i - 1, i, i + 1]

    # -- regression points -------------------------------------------------

    def interval_of(self, s: float) -> int:
        """Index i of the interval [s_i, s_{i+1}] containing ``s``."""
        i = int(np.searchsorted(self.locations, s, side="right")) - 1
        return min(max(i, 0), self.n - 2)

    def _snap_tol(self) -> float:
        return 1e-12 * (self.locations[-1] - self.locations[0])

    def fill_interval(self, i: int, mu_left: float, mu_right: float, points, gamma) -> np.ndarray:
        """Solve ``mu'' = w`` on [s_i, s_{i+1}] through the given interior points.

        The ends are pinned to ``mu_left``/``mu_right``; the sub-grid uses the
        three-point stencil for unequal spacings.  Needs only data held by
        sensors ``i`` and ``i + 1``.
        """
        pts = np.sort(np.asarray(points, dtype=float))
        if pts.size == 0:
            return pts
        lo, hi = self.locations[i], self.locations[i + 1]
        x = np.concatenate([[lo], pts, [hi]])
        h = np.diff(x)
        k = pts.size
        hm, hp = h[:-1], h[1:]
        # 2/(hm+hp) * [ (u+ - u)/hp - (u - u-)/hm ] = w, multiplied by (hm+hp)/2
        sub = 1.0 / hm
        sup = 1.0 / hp
        diag = -(1.0 / hm + 1.0 / hp)
        rhs = 0.5 * (hm + hp) * self.source(pts, gamma)
        rhs[0] -= sub[0] * mu_left
        rhs[-1] -= sup[-1] * mu_right
        ab = np.zeros((3, k))
        ab[0, 1:] = sup[:-1]
        ab[1, :] = diag
        ab[2, :-1] = sub[1:]
        return solve_banded((1, 1), ab, rhs)

    def split_grid(self, points):
        """Group regression points by interval.

        Returns ``(coincident, groups)``: ``coincident`` maps grid index to
        sensor index for points sitting on a sensor; ``groups`` maps interval
        index to the grid indices strictly inside it.
        """
        pts = _as_1d_locations(points)
        s, tol = self.locations, self._snap_tol()
        if np.any(pts < s[0] - tol) or np.any(pts > s[-1] + tol):
            raise InvalidInputError(
                f"regression points must lie in [{s[0]}, {s[-1]}] for the Poisson mean")
        coincident: dict[int, int] = {}
        groups: dict[int, list[int]] = {}
        for m, p in enumerate(pts):
            j = int(np.argmin(np.abs(s - p)))
            if abs(s[j] - p) <= tol:
                coincident[m] = j
            else:
                groups.setdefault(self.interval_of(p), []).append(m)
        return coincident, groups

    def regression_mean(self, gamma, grid, mu=None) -> np.ndarray:
        """Mean at regression points via piecewise Dirichlet solves.

        Measurement-point values stay pinned to :meth:`solve_mean`, and each
        interval between consecutive sensors is solved on the union of its
        end points and the regression points it contains.
        """
        pts = grid.coords if hasattr(grid, "coords") else _as_1d_locations(grid)
        mu = self.solve_mean(gamma) if mu is None else np.asarray(mu, dtype=float)
        coincident, groups = self.split_grid(pts)
        out = np.empty(pts.size)
        for m, j in coincident.items():
            out[m] = mu[j]
        for i, idx in groups.items():
            order = np.argsort(pts[idx], kind="stable")
            idx_sorted = np.asarray(idx)[order]
            out[idx_sorted] = self.fill_interval(i, mu[i], mu[i + 1], pts[idx_sorted], gamma)
        return out

    # -- per-node views for the distributed solver -------------------------

    def symmetric_system(self):
        """SPD matrix S with S mu = c(gamma); rows only couple mean-dependency neighbors.

        Interior rows are the negated second difference with the boundary
        neighbors moved to the right-hand side; boundary rows are identity.
        """
        n = self.n
        main = np.full(n, 2.0)
        main[0] = main[-1] = 1.0
        off = np.full(n - 1, -1.0)
        off[0] = off[-1] = 0.0
        return sp.diags([off, main, off], [-1, 0, 1], format="csr")

    def symmetric_rhs(self, i: int, gamma) -> float:
        n = self.n
        if i == 0:
            return self.boundary[0]
        if i == n - 1:
            return self.boundary[1]
        val = -self.spacing ** 2 * float(self.source(self.locations[i], gamma))
        if i == 1:
            val += self.boundary[0]
        if i == n - 2:
            val += self.boundary[1]
        return val

    def symmetric_rhs_jacobian(self, i: int, gamma) -> np.ndarray:
        if i in (0, self.n - 1):
            return np.zeros(3)
        _, dw = _source_terms(np.asarray(self.locations[i]), gamma)
        return -self.spacing ** 2 * dw


# --------------------------------------------------------------------------
# Explicit, linear-in-gamma means
# --------------------------------------------------------------------------


class LinearMean(SpatialDynamics):
    """Mean ``mu(s) = b(s) . gamma`` for a fixed basis ``b``."""

    explicit = True
    linear = True

    def __init__(self, locations, n_params: int, lower=None, upper=None):
        self.locations = _as_1d_locations(locations)
        self._p = int(n_params)
        self.lower = np.full(self._p, -np.inf) if lower is None else np.asarray(lower, dtype=float)
        self.upper = np.full(self._p, np.inf) if upper is None else np.asarray(upper, dtype=float)
        self._train_basis = None

    @property
    def n_params(self) -> int:
        return self._p

    @abstractmethod
    def basis(self, s) -> np.ndarray:
        """Basis matrix with one row per evaluation point."""

    @property
    def train_basis(self) -> np.ndarray:
        if self._train_basis is None:
            self._train_basis = self.basis(self.locations)
        return self._train_basis

    def residual(self, mu, gamma) -> np.ndarray:
        return np.asarray(mu, dtype=float) - self.train_basis @ np.asarray(gamma, dtype=float)

    def solve_mean(self, gamma) -> np.ndarray:
        return self.train_basis @ np.asarray(gamma, dtype=float)

    def mean_jacobian(self, gamma=None) -> np.ndarray:
        return self.train_basis.copy()

    def regression_mean(self, gamma, grid) -> np.ndarray:
        pts = grid.coords if hasattr(grid, "coords") else _as_1d_locations(grid)
        return self.basis(pts) @ np.asarray(gamma, dtype=float)

    def mean_neighbors(self, i: int) -> list[int]:
        return [i]

    def local_mean(self, i: int, gamma) -> float:
        return float(self.train_basis[i] @ np.asarray(gamma, dtype=float))


class ConstantMean(LinearMean):
    """Single unknown level shared by every point."""

    def __init__(self, locations, lower=None, upper=None):
        super().__init__(locations, 1, lower, upper)

    def basis(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float)).ravel()
        return np.ones((s.size, 1))


class NaturalSpline(LinearMean):
    """Natural cubic spline with values ``gamma`` at control points.

    Outside ``[c_1, c_Q]`` the first/last cubic piece is extended.
    """

    def __init__(self, locations, knots, lower=None, upper=None):
        c = np.asarray(knots, dtype=float).ravel()
        if c.size < 2:
            raise InvalidInputError("a natural spline needs at least 2 control points")
        if np.any(np.diff(c) <= 0):
            raise InvalidInputError("control points must be distinct and sorted")
        self.knots = c
        super().__init__(locations, c.size, lower, upper)
        self._moments = self._moment_map(c)

    @classmethod
    def from_indices(cls, locations, indices, one_based: bool = True, **kw):
        s = _as_1d_locations(locations)
        idx = [int(i) - (1 if one_based else 0) for i in indices]
        if any(i < 0 or i >= s.size for i in idx):
            raise InvalidInputError(f"knot indices {list(indices)} out of range for {s.size} sensors")
        return cls(s, s[idx], **kw)

    @staticmethod
    def _moment_map(c: np.ndarray) -> np.ndarray:
        """Q x Q matrix mapping knot values to second derivatives."""
        q = c.size
        h = np.diff(c)
        mom = np.zeros((q, q))
        if q == 2:
            return mom
        k = q - 2
        ab = np.zeros((3, k))
        ab[0, 1:] = h[1:-1]
        ab[1, :] = 2.0 * (h[:-1] + h[1:])
        ab[2, :-1] = h[1:-1]
        rhs = np.zeros((k, q))
        for r in range(k):
            j = r + 1
            rhs[r, j - 1] += 6.0 / h[j - 1]
            rhs[r, j] -= 6.0 / h[j - 1] + 6.0 / h[j]
            rhs[r, j + 1] += 6.0 / h[j]
        mom[1:-1] = solve_banded((1, 1), ab, rhs)
        return mom

    def basis(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float)).ravel()
        c, mom = self.knots, self._moments
        q = c.size
        j = np.clip(np.searchsorted(c, s, side="right") - 1, 0, q - 2)
        h = c[j + 1] - c[j]
        t = s - c[j]
        rows = np.arange(s.size)
        out = np.zeros((s.size, q))
        # value:  g_j + slope * t + M_j/2 t^2 + (M_{j+1} - M_j)/(6h) t^3
        # slope:  (g_{j+1} - g_j)/h - h (2 M_j + M_{j+1}) / 6
        out[rows, j] += 1.0 - t / h
        out[rows, j + 1] += t / h
        mj, mj1 = mom[j], mom[j + 1]
        h_, t_ = h[:, None], t[:, None]
        out -= h_ * (2.0 * mj + mj1) / 6.0 * t_
        out += 0.5 * mj * t_ ** 2
        out += (mj1 - mj) / (6.0 * h_) * t_ ** 3
        return out
