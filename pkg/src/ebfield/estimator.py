"""Maximum-likelihood mean hyperparameters and the MAP field posterior.

With ``r(gamma) = mu_gamma - xbar`` and ``A = K_ss + D`` the ML estimate
minimizes ``r^T A^{-1} r``.  That inverse is dense, so the cost is evaluated
through the auxiliary variable ``z`` solving ``A z = r``, giving
``cost = z^T A z`` with only sparse operations.  The posterior at
regression points is then ``mu^R - K_Rs z`` with covariance
``K_RR - K_Rs A^{-1} K_sR``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dynamics import Hyperparameters, SpatialDynamics
from .errors import InvalidInputError, ModelMisspecificationError
from .kernel import CompactKernel, cov_cross, cov_train, dense_cov, spd_check
from .model import ObservationSet, RegressionGrid, SufficientStats, sufficient_stats

log = logging.getLogger(__name__)

CONFIDENCE_MULTIPLIER = 1.96


@dataclass(frozen=True)
class SolverConfig:
    """Settings of the Gauss-Newton driver and the iterative solves.

    ``tol`` bounds the projected gradient; ``decrement_tol`` stops the fit
    once the Gauss-Newton model predicts a cost decrease below
    ``decrement_tol * (1 + cost)``, i.e. at working precision.
    """

    tol: float = 1e-8
    decrement_tol: float = 1e-14
    max_iters: int = 200
    n_starts: int = 8
    armijo_slope: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40
    cg_tol: float = 1e-12
    seed: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


class TrainSystem:
    """``K_ss``, ``D`` and a factorization of ``K_ss + D`` for repeated solves."""

    def __init__(self, kernel: CompactKernel, locations, stats: SufficientStats):
        self.kernel = kernel
        self.locations = np.asarray(locations, dtype=float)
        self.stats = stats
        self.k_ss = cov_train(kernel, locations)
        n = self.k_ss.rows
        if stats.xbar.shape != (n,):
            raise InvalidInputError("statistics and locations disagree on the number of sensors")
        self.matrix = (self.k_ss.csr + sp.diags(stats.d_diag)).tocsc()
        if not spd_check(self.matrix):
            raise ModelMisspecificationError("K_ss + D is not positive definite")
        self._lu = spla.splu(self.matrix)

    @classmethod
    def from_observations(cls, kernel: CompactKernel, obs: ObservationSet) -> "TrainSystem":
        return cls(kernel, obs.locations, sufficient_stats(obs))

    @property
    def n(self) -> int:
        return self.k_ss.rows

    @property
    def xbar(self) -> np.ndarray:
        return self.stats.xbar

    def solve(self, rhs) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        return self._lu.solve(rhs)

    def matvec(self, v) -> np.ndarray:
        """``(K_ss + D) v`` summed as ``d_i v_i + sum_j K_ij v_j`` in sorted-j order."""
        v = np.asarray(v, dtype=float)
        m = self.k_ss.csr
        out = np.empty(self.n)
        for i in range(self.n):
            acc = self.stats.d_diag[i] * v[i]
            for ptr in range(m.indptr[i], m.indptr[i + 1]):
                acc += m.data[ptr] * v[m.indices[ptr]]
            out[i] = acc
        return out


@dataclass
class MLResult:
    gamma: Hyperparameters
    z: np.ndarray
    mu: np.ndarray
    cost: float
    iterations: int
    converged: bool
    diagnostics: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @property
    def gamma_ml(self) -> np.ndarray:
        return self.gamma.values

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma.values.tolist(),
            "lower": self.gamma.lower.tolist(),
            "upper": self.gamma.upper.tolist(),
            "z": self.z.tolist(),
            "mu": self.mu.tolist(),
            "cost": self.cost,
            "iterations": self.iterations,
            "converged": self.converged,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLResult":
        hp = Hyperparameters(d["gamma"], d["lower"], d["upper"])
        return cls(hp, np.asarray(d["z"], dtype=float), np.asarray(d["mu"], dtype=float),
                   float(d["cost"]), int(d["iterations"]), bool(d["converged"]),
                   dict(d.get("diagnostics", {})))


@dataclass(frozen=True)
class Posterior:
    mean: np.ndarray
    covariance: np.ndarray
    lower95: np.ndarray
    upper95: np.ndarray

    @classmethod
    def from_moments(cls, mean, covariance) -> "Posterior":
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(covariance, dtype=float)
        cov = 0.5 * (cov + cov.T)
        half = CONFIDENCE_MULTIPLIER * np.sqrt(np.maximum(np.diag(cov), 0.0))
        return cls(mean, cov, mean - half, mean + half)

    @property
    def variance(self) -> np.ndarray:
        return np.diag(self.covariance).copy()


# --------------------------------------------------------------------------
# ML cost, gradient and fit
# --------------------------------------------------------------------------


def ml_cost(dyn: SpatialDynamics, system: TrainSystem, gamma) -> tuple[float, np.ndarray]:
    mu = dyn.solve_mean(gamma)
    z = system.solve(mu - system.xbar)
    cost = float(z @ system.matvec(z))
    return cost, z


def ml_gradient(dyn: SpatialDynamics, system: TrainSystem, gamma) -> np.ndarray:
    _, z = ml_cost(dyn, system, gamma)
    return 2.0 * dyn.mean_jacobian(gamma).T @ z


@dataclass
class _Eval:
    cost: float
    z: np.ndarray
    mu: np.ndarray


def projected_gauss_newton(evaluate: Callable[[np.ndarray], _Eval],
                           derivatives: Callable[[np.ndarray, _Eval], tuple[np.ndarray, np.ndarray]],
                           init: Hyperparameters, cfg: SolverConfig) -> MLResult:
    """Box-constrained Gauss-Newton with Armijo backtracking.

    ``evaluate(gamma)`` returns cost, z and mu; ``derivatives(gamma, ev)``
    returns the gradient ``2 J^T z`` and the Gauss-Newton matrix
    ``J^T A^{-1} J``.  The same driver runs the centralized and the
    distributed fits so both walk identical iterate sequences.
    """
    gamma = init.clip(init.values)
    ev = evaluate(gamma)
    history = [(gamma.copy(), ev.cost)]
    converged, reason, it = False, "max_iters", 0
    for it in range(cfg.max_iters):
        grad, gn = derivatives(gamma, ev)
        pgrad = gamma - init.clip(gamma - grad)
        if np.max(np.abs(pgrad), initial=0.0) <= cfg.tol:
            converged, reason = True, "gradient"
            break
        # variables pinned at a bound with the gradient pointing outward stay fixed
        active = ((gamma <= init.lower) & (grad > 0)) | ((gamma >= init.upper) & (grad < 0))
        free = ~active
        step = np.zeros_like(gamma)
        step[free], *_ = np.linalg.lstsq(gn[np.ix_(free, free)], -0.5 * grad[free], rcond=None)
        if -0.5 * float(grad @ step) <= cfg.decrement_tol * (1.0 + abs(ev.cost)):
            converged, reason = True, "decrement"
            break
        t, accepted = 1.0, False
        for _ in range(cfg.max_backtracks):
            trial = init.clip(gamma + t * step)
            trial_ev = evaluate(trial)
            if trial_ev.cost <= ev.cost + cfg.armijo_slope * float(grad @ (trial - gamma)):
                accepted = True
                break
            t *= cfg.backtrack
        if not accepted:
            reason = "line_search"
            break
        if np.array_equal(trial, gamma):
            # step below floating-point resolution of gamma
            reason = "stalled"
            break
        gamma, ev = trial, trial_ev
        history.append((gamma.copy(), ev.cost))
    else:
        it = cfg.max_iters
    diag = {"reason": reason, "solver": cfg.as_dict()}
    return MLResult(init.with_values(gamma), ev.z, ev.mu, ev.cost, it, converged, diag, history)


def _centralized_callbacks(dyn: SpatialDynamics, system: TrainSystem):
    def evaluate(gamma):
        mu = dyn.solve_mean(gamma)
        z = system.solve(mu - system.xbar)
        return _Eval(float(z @ system.matvec(z)), z, mu)

    def derivatives(gamma, ev):
        jac = dyn.mean_jacobian(gamma)
        wj = system.solve(jac)
        return 2.0 * jac.T @ ev.z, jac.T @ wj

    return evaluate, derivatives


def fit_linear(dyn: SpatialDynamics, system: TrainSystem, init: Hyperparameters | None = None) -> MLResult:
    """Exact minimizer for a mean linear in gamma: ``B^T W B g = B^T W xbar``."""
    basis = dyn.mean_jacobian(None)
    wb = system.solve(basis)
    gamma = np.linalg.solve(basis.T @ wb, wb.T @ system.xbar)
    hp = dyn.hyperparameters(gamma) if init is None else init.with_values(gamma)
    mu = basis @ gamma
    z = system.solve(mu - system.xbar)
    cost = float(z @ system.matvec(z))
    return MLResult(hp, z, mu, cost, 0, True, {"reason": "normal_equations"})


def fit_ml(dyn: SpatialDynamics, system: TrainSystem, init: Hyperparameters,
           cfg: SolverConfig = SolverConfig()) -> MLResult:
    if not init.within_bounds():
        raise InvalidInputError(f"initial hyperparameters {init.values} outside the box")
    if dyn.linear:
        res = fit_linear(dyn, system, init)
        res.diagnostics["solver"] = cfg.as_dict()
        return res
    evaluate, derivatives = _centralized_callbacks(dyn, system)
    res = projected_gauss_newton(evaluate, derivatives, init, cfg)
    if not res.converged:
        log.warning("ML fit stopped without converging: %s", res.diagnostics["reason"])
    return res


def start_points(init: Hyperparameters, cfg: SolverConfig) -> list[Hyperparameters]:
    """``init`` followed by ``n_starts - 1`` uniform draws from the box."""
    starts = [init]
    if cfg.n_starts > 1 and np.all(np.isfinite(init.lower)) and np.all(np.isfinite(init.upper)):
        rng = np.random.Generator(np.random.Philox(cfg.seed))
        for _ in range(cfg.n_starts - 1):
            starts.append(init.with_values(rng.uniform(init.lower, init.upper)))
    return starts


def pick_best(results: list[MLResult]) -> MLResult:
    """Lowest cost wins; ties go to the earliest start."""
    best_i = 0
    for i, r in enumerate(results):
        if r.cost < results[best_i].cost:
            best_i = i
    best = results[best_i]
    best.diagnostics["start_index"] = best_i
    best.diagnostics["start_costs"] = [r.cost for r in results]
    return best


def fit_ml_multistart(dyn: SpatialDynamics, system: TrainSystem, init: Hyperparameters,
                      cfg: SolverConfig = SolverConfig()) -> MLResult:
    if dyn.linear:
        return fit_ml(dyn, system, init, cfg)
    return pick_best([fit_ml(dyn, system, s, cfg) for s in start_points(init, cfg)])


# --------------------------------------------------------------------------
# Posterior
# --------------------------------------------------------------------------


def map_posterior(ml: MLResult, dyn: SpatialDynamics, system: TrainSystem,
                  grid: RegressionGrid) -> Posterior:
    k = system.kernel
    k_rs = cov_cross(k, grid.points, system.locations)
    prior = regression_prior_mean(dyn, ml, grid)
    mean = prior - k_rs.csr @ ml.z
    k_sr = k_rs.csr.T.toarray()
    solved = np.zeros_like(k_sr)
    nonzero = np.flatnonzero(np.any(k_sr != 0.0, axis=0))
    if nonzero.size:
        solved[:, nonzero] = system.solve(k_sr[:, nonzero])
    k_rr = cov_train(k, grid.points).toarray()
    cov = k_rr - k_rs.csr @ solved
    return Posterior.from_moments(mean, cov)


def regression_prior_mean(dyn: SpatialDynamics, ml: MLResult, grid: RegressionGrid) -> np.ndarray:
    if dyn.explicit:
        return dyn.regression_mean(ml.gamma_ml, grid)
    return dyn.regression_mean(ml.gamma_ml, grid, mu=ml.mu)


def measurement_point_map(ml: MLResult, system: TrainSystem) -> np.ndarray:
    """MAP at the sensors: ``mu_i - sum_{j in N_i} [K_ss]_ij z_j``."""
    m = system.k_ss.csr
    out = np.empty(system.n)
    for i in range(system.n):
        acc = 0.0
        for ptr in range(m.indptr[i], m.indptr[i + 1]):
            acc += m.data[ptr] * ml.z[m.indices[ptr]]
        out[i] = ml.mu[i] - acc
    return out


MAX_DENSE_OBSERVATIONS = 200


def dense_posterior_oracle(obs: ObservationSet, dyn: SpatialDynamics, kernel: CompactKernel,
                           gamma, grid: RegressionGrid) -> Posterior:
    """Textbook GP posterior over every raw sample, sensors repeated ``L_i`` times."""
    counts = obs.counts
    total = int(counts.sum())
    if total > MAX_DENSE_OBSERVATIONS:
        raise InvalidInputError(f"dense oracle limited to {MAX_DENSE_OBSERVATIONS} samples, got {total}")
    q = np.repeat(obs.locations, counts, axis=0)
    x = np.concatenate([np.asarray(s.observations) for s in obs.sensors])
    mu_l = np.repeat(dyn.solve_mean(gamma), counts)
    k_qq = dense_cov(kernel, q)
    k_rq = dense_cov(kernel, grid.points, q)
    k_rr = dense_cov(kernel, grid.points)
    a = k_qq + obs.noise_variance * np.eye(total)
    mu_r = dyn.regression_mean(gamma, grid)
    mean = mu_r - k_rq @ np.linalg.solve(a, mu_l - x)
    cov = k_rr - k_rq @ np.linalg.solve(a, k_rq.T)
    return Posterior.from_moments(mean, cov)
