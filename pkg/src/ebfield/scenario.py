"""Scenario configuration, synthetic data, the end-to-end pipeline and
Monte-Carlo studies.

Two presets reproduce the simulated experiments:

``temperature``
    N = 10 uniformly spaced sensors on [0, 2 pi/3]; truth is the exact
    solution of ``mu'' = -A w^2 sin(w s + phi)`` with A = 6, w = 3, phi = 3
    and boundary values 3 and 0; the mean model is the discretized Poisson
    problem with unknown (A, w, phi).
``spline``
    N = 12 sensors in five clusters on [-15, 14]; truth is
    ``0.1 s^2 + 0.1 s + 10``; the mean model is a natural cubic spline with
    knots at sensors 1, 3, 5, 7 and 12.

Values tagged "calibration default" in :data:`PRESETS` are free choices
rather than part of the experiment definition:
sensor coordinates of the spline scenario, noise levels, sample counts and
kernel parameters.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .distnet import Network, NetworkTrace
from .dynamics import Hyperparameters, NaturalSpline, Poisson1D, SpatialDynamics
from .errors import InvalidInputError, ScenarioValidationError, ToleranceError
from .estimator import (MLResult, Posterior, SolverConfig, TrainSystem, fit_ml_multistart,
                        map_posterior, regression_prior_mean)
from .kernel import CompactKernel
from .model import (ObservationSet, RegressionGrid, build_interaction_graph, sufficient_stats,
                    validate_scenario)

log = logging.getLogger(__name__)

SPLINE_LOCATIONS = [-15.0, -14.0, -8.0, -7.0, -2.0, -1.0, 4.0, 5.0, 6.0, 12.0, 13.0, 14.0]  # calibration default
SPLINE_SAMPLES = [6, 2, 8, 1, 3, 10, 2, 5, 1, 4, 2, 7]  # calibration default

PRESETS: dict[str, dict] = {
    "temperature": {
        "scenario": "temperature",
        "seed": 0,
        "locations": {"uniform": [0.0, 2.0 * math.pi / 3.0], "count": 10},
        "samples_per_node": 25,        # calibration default
        "noise_variance": 0.01,        # calibration default
        "kernel": {"signal_variance": 1e-3, "support_length": None},  # calibration default
        "truth": {"family": "heat", "A": 6.0, "omega": 3.0, "phi": 3.0, "boundary": [3.0, 0.0]},
        "dynamics": {"kind": "poisson", "boundary": [3.0, 0.0], "init": [5.0, 2.5, 2.5],
                     "lower": [0.0, 0.1, -math.pi], "upper": [20.0, 10.0, math.pi]},
        "grid": {"count": 200, "range": None},
        "solver": {},
    },
    "spline": {
        "scenario": "spline",
        "seed": 0,
        "locations": {"explicit": SPLINE_LOCATIONS},
        "samples_per_node": SPLINE_SAMPLES,
        "noise_variance": 1.0,         # calibration default
        "kernel": {"signal_variance": 4.0, "support_length": None},  # calibration default
        "truth": {"family": "quadratic", "a": 0.1, "b": 0.1, "c": 10.0},
        "dynamics": {"kind": "spline", "knots": [1, 3, 5, 7, 12], "init": None},
        "grid": {"count": 300, "range": None},
        "solver": {},
    },
}

_TOP_KEYS = {"scenario", "seed", "locations", "samples_per_node", "noise_variance", "kernel",
             "truth", "dynamics", "grid", "solver"}
_SUB_KEYS = {
    "locations": {"uniform", "count", "explicit"},
    "kernel": {"signal_variance", "support_length"},
    "grid": {"count", "range"},
    "solver": set(SolverConfig.__dataclass_fields__),
}
_TRUTH_KEYS = {"heat": {"family", "A", "omega", "phi", "boundary"},
               "quadratic": {"family", "a", "b", "c"}}
_DYN_KEYS = {"poisson": {"kind", "boundary", "init", "lower", "upper"},
             "spline": {"kind", "knots", "init"}}


def _check_keys(where: str, given: dict, allowed: set):
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise InvalidInputError(f"unknown keys in {where}: {unknown}")


@dataclass
class ScenarioConfig:
    scenario: str
    seed: int
    locations: dict
    samples_per_node: object
    noise_variance: float
    kernel: dict
    truth: dict
    dynamics: dict
    grid: dict
    solver: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        if not isinstance(raw, dict):
            raise InvalidInputError("scenario config must be a JSON object")
        _check_keys("config", raw, _TOP_KEYS)
        kind = raw.get("scenario")
        if kind not in ("temperature", "spline", "custom"):
            raise InvalidInputError(f"scenario must be temperature, spline or custom, got {kind!r}")
        if "seed" not in raw:
            raise InvalidInputError("seed is mandatory")
        base = copy.deepcopy(PRESETS.get(kind, {}))
        merged = {**base, **copy.deepcopy(raw)}
        for key in ("kernel", "grid", "solver"):
            if key in raw and key in base:
                merged[key] = {**base[key], **raw[key]}
        missing = sorted(_TOP_KEYS - set(merged) - {"solver"})
        if missing:
            raise InvalidInputError(f"custom scenario is missing {missing}")
        for key, allowed in _SUB_KEYS.items():
            if merged.get(key) is not None:
                _check_keys(key, merged[key], allowed)
        fam = merged["truth"].get("family")
        if fam not in _TRUTH_KEYS:
            raise InvalidInputError(f"truth family must be one of {sorted(_TRUTH_KEYS)}")
        _check_keys("truth", merged["truth"], _TRUTH_KEYS[fam])
        dk = merged["dynamics"].get("kind")
        if dk not in _DYN_KEYS:
            raise InvalidInputError(f"dynamics kind must be one of {sorted(_DYN_KEYS)}")
        _check_keys("dynamics", merged["dynamics"], _DYN_KEYS[dk])
        if not isinstance(merged["seed"], int) or isinstance(merged["seed"], bool):
            raise InvalidInputError("seed must be an integer")
        cfg = cls(kind, merged["seed"], merged["locations"], merged["samples_per_node"],
                  float(merged["noise_variance"]), merged["kernel"], merged["truth"],
                  merged["dynamics"], merged["grid"], merged.get("solver") or {})
        cfg.solver_config()  # type-check solver overrides early
        return cfg

    @classmethod
    def preset(cls, name: str, **overrides) -> "ScenarioConfig":
        if name not in PRESETS:
            raise InvalidInputError(f"no preset named {name!r}")
        raw = copy.deepcopy(PRESETS[name])
        raw.update(overrides)
        return cls.from_dict(raw)

    @classmethod
    def loads(cls, text: str) -> "ScenarioConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "locations": copy.deepcopy(self.locations),
            "samples_per_node": copy.deepcopy(self.samples_per_node),
            "noise_variance": self.noise_variance,
            "kernel": dict(self.kernel),
            "truth": copy.deepcopy(self.truth),
            "dynamics": copy.deepcopy(self.dynamics),
            "grid": copy.deepcopy(self.grid),
            "solver": dict(self.solver),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_seed(self, seed: int) -> "ScenarioConfig":
        out = copy.deepcopy(self)
        out.seed = int(seed)
        return out

    # -- resolved quantities ------------------------------------------------

    def sensor_locations(self) -> np.ndarray:
        loc = self.locations
        if "explicit" in loc:
            pts = np.asarray(loc["explicit"], dtype=float)
        elif "uniform" in loc:
            lo, hi = loc["uniform"]
            count = loc.get("count")
            if count is None:
                raise InvalidInputError("uniform locations need a count")
            pts = np.linspace(float(lo), float(hi), int(count))
        else:
            raise InvalidInputError("locations need either 'uniform' or 'explicit'")
        if pts.ndim != 1 or pts.size < 1:
            raise InvalidInputError("locations must be a non-empty list of numbers")
        return pts

    def sample_counts(self, n: int) -> np.ndarray:
        spec = self.samples_per_node
        counts = np.full(n, spec, dtype=int) if np.isscalar(spec) else np.asarray(spec, dtype=int)
        if counts.shape != (n,) or np.any(counts < 1):
            raise InvalidInputError(f"samples_per_node must be >= 1 for each of the {n} sensors")
        return counts

    def build_kernel(self, locations: np.ndarray) -> CompactKernel:
        support = self.kernel.get("support_length")
        if support is None:
            gaps = np.diff(np.sort(locations))
            support = 2.0 * float(gaps.max()) if gaps.size else 1.0
        return CompactKernel(float(self.kernel["signal_variance"]), float(support))

    def solver_config(self) -> SolverConfig:
        try:
            return SolverConfig(**self.solver)
        except TypeError as exc:
            raise InvalidInputError(f"bad solver settings: {exc}") from exc

    def build_grid(self, locations: np.ndarray) -> RegressionGrid:
        rng = self.grid.get("range")
        lo, hi = (float(locations.min()), float(locations.max())) if rng is None else map(float, rng)
        return RegressionGrid.linspace(lo, hi, int(self.grid["count"]))


# --------------------------------------------------------------------------
# Truth fields and data generation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class HeatTruth:
    """Exact solution ``A sin(w s + phi) + C1 s + C0`` of the Dirichlet problem."""

    A: float
    omega: float
    phi: float
    s1: float
    sn: float
    w1: float
    wn: float

    @property
    def c1(self) -> float:
        return (self.wn - self.A * math.sin(self.omega * self.sn + self.phi)
                - self.w1 + self.A * math.sin(self.omega * self.s1 + self.phi)) / (self.sn - self.s1)

    @property
    def c0(self) -> float:
        return self.w1 - self.A * math.sin(self.omega * self.s1 + self.phi) - self.c1 * self.s1

    @property
    def gamma(self) -> np.ndarray:
        return np.array([self.A, self.omega, self.phi])

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        a1 = self.A * math.sin(self.omega * self.s1 + self.phi)
        an = self.A * math.sin(self.omega * self.sn + self.phi)
        span = self.sn - self.s1
        # same line as C1 s + C0, written through the end points so the
        # boundary values come out exact
        return (self.A * np.sin(self.omega * s + self.phi)
                + (self.w1 - a1) * (self.sn - s) / span + (self.wn - an) * (s - self.s1) / span)


@dataclass(frozen=True)
class QuadraticTruth:
    a: float
    b: float
    c: float
    gamma = None

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        return self.a * s * s + self.b * s + self.c


def noise_generator(seed: int) -> np.random.Generator:
    """Ziggurat normals over the counter-based Philox4x64 bit generator."""
    return np.random.Generator(np.random.Philox(int(seed)))


def _sample(cfg: ScenarioConfig, locations: np.ndarray, truth: Callable) -> ObservationSet:
    counts = cfg.sample_counts(locations.size)
    rng = noise_generator(cfg.seed)
    sigma = math.sqrt(max(cfg.noise_variance, 0.0))
    values = truth(locations)
    observations = []
    for i in range(locations.size):
        eps = rng.standard_normal(int(counts[i]))
        observations.append((values[i] + sigma * eps).tolist())
    return ObservationSet.from_arrays(locations, observations, cfg.noise_variance)


def make_truth(cfg: ScenarioConfig, locations: np.ndarray):
    t = cfg.truth
    if t["family"] == "heat":
        w1, wn = t.get("boundary", [3.0, 0.0])
        return HeatTruth(float(t["A"]), float(t["omega"]), float(t["phi"]),
                         float(locations[0]), float(locations[-1]), float(w1), float(wn))
    return QuadraticTruth(float(t["a"]), float(t["b"]), float(t["c"]))


def generate_temperature(cfg: ScenarioConfig) -> tuple[ObservationSet, HeatTruth]:
    s = cfg.sensor_locations()
    if s.size < 3:
        raise InvalidInputError("temperature scenario needs N >= 3")
    truth = make_truth(cfg, s)
    if not isinstance(truth, HeatTruth):
        raise InvalidInputError("temperature scenario needs a heat truth")
    return _sample(cfg, s, truth), truth


def generate_spline_scenario(cfg: ScenarioConfig) -> tuple[ObservationSet, QuadraticTruth]:
    s = cfg.sensor_locations()
    knots = cfg.dynamics.get("knots", [])
    if any(int(k) < 1 or int(k) > s.size for k in knots):
        raise InvalidInputError(f"knot indices {knots} out of range for {s.size} sensors")
    truth = make_truth(cfg, s)
    return _sample(cfg, s, truth), truth


def generate(cfg: ScenarioConfig):
    if cfg.truth["family"] == "heat":
        return generate_temperature(cfg)
    return generate_spline_scenario(cfg)


# --------------------------------------------------------------------------
# Pipeline
# --------------------------------------------------------------------------


@dataclass
class Problem:
    config: ScenarioConfig
    observations: ObservationSet
    truth: Callable
    kernel: CompactKernel
    dynamics: SpatialDynamics
    system: TrainSystem
    grid: RegressionGrid
    init: Hyperparameters
    solver: SolverConfig

    @property
    def true_gamma(self) -> Optional[np.ndarray]:
        return getattr(self.truth, "gamma", None)


def build_dynamics(cfg: ScenarioConfig, locations: np.ndarray) -> SpatialDynamics:
    d = cfg.dynamics
    if d["kind"] == "poisson":
        return Poisson1D(locations, boundary=d.get("boundary", (3.0, 0.0)),
                         lower=d.get("lower", (0.0, 0.1, -math.pi)),
                         upper=d.get("upper", (20.0, 10.0, math.pi)))
    return NaturalSpline.from_indices(locations, d["knots"])


def build_problem(cfg: ScenarioConfig) -> Problem:
    obs, truth = generate(cfg)
    locations = obs.locations[:, 0]
    kernel = cfg.build_kernel(locations)
    grid = cfg.build_grid(locations)
    graph = build_interaction_graph(obs.locations, kernel)
    problems = validate_scenario(obs, grid, graph)
    if problems:
        raise ScenarioValidationError(problems)
    dyn = build_dynamics(cfg, locations)
    system = TrainSystem(kernel, obs.locations, sufficient_stats(obs))
    init_vals = cfg.dynamics.get("init")
    if init_vals is None:
        lo, hi = dyn.lower, dyn.upper
        finite = np.isfinite(lo) & np.isfinite(hi)
        init_vals = np.zeros(dyn.n_params)
        init_vals[finite] = 0.5 * (lo[finite] + hi[finite])
    init = dyn.hyperparameters(init_vals)
    return Problem(cfg, obs, truth, kernel, dyn, system, grid, init, cfg.solver_config())


@dataclass(frozen=True)
class TrialMetrics:
    rmse_map: float
    rmse_prior: float
    coverage95: float
    gamma_error: Optional[tuple[float, ...]] = None

    def to_dict(self) -> dict:
        return {"rmse_map": self.rmse_map, "rmse_prior": self.rmse_prior,
                "coverage95": self.coverage95,
                "gamma_error": None if self.gamma_error is None else list(self.gamma_error)}


def trial_metrics(truth_values, prior_mean, posterior: Posterior,
                  gamma=None, true_gamma=None) -> TrialMetrics:
    truth_values = np.asarray(truth_values, dtype=float)
    rmse_map = float(np.sqrt(np.mean((posterior.mean - truth_values) ** 2)))
    rmse_prior = float(np.sqrt(np.mean((np.asarray(prior_mean) - truth_values) ** 2)))
    inside = (posterior.lower95 <= truth_values) & (truth_values <= posterior.upper95)
    gerr = None
    if gamma is not None and true_gamma is not None:
        gerr = tuple(float(v) for v in np.abs(np.asarray(gamma) - true_gamma) / np.abs(true_gamma))
    return TrialMetrics(rmse_map, rmse_prior, float(np.mean(inside)), gerr)


@dataclass
class PipelineResult:
    problem: Problem
    mode: str
    ml: MLResult
    prior_mean: np.ndarray
    posterior: Posterior
    metrics: TrialMetrics
    trace: Optional[NetworkTrace] = None
    comparison: Optional[dict] = None

    @property
    def truth_on_grid(self) -> np.ndarray:
        return self.problem.truth(self.problem.grid.coords)


# tolerances for distributed-vs-centralized agreement
COST_RTOL = 1e-6
GAMMA_ATOL = 1e-5
LOCAL_MAP_ATOL = 1e-10


def compare_fits(problem: Problem, central: MLResult, dist: MLResult, net: Network) -> dict:
    """Deviations between the in-network and centralized results."""
    dcost = abs(dist.cost - central.cost)
    dgamma = float(np.max(np.abs(dist.gamma_ml - central.gamma_ml)))
    post_same_fit = map_posterior(dist, problem.dynamics, problem.system, problem.grid)
    local = np.array([net.local_map(problem.grid, m) for m in range(problem.grid.m)])
    dmap = float(np.max(np.abs(local - post_same_fit.mean)))
    return {
        "cost_central": central.cost,
        "cost_distributed": dist.cost,
        "cost_deviation": dcost,
        "cost_ok": bool(dcost <= COST_RTOL * (1.0 + central.cost)),
        "gamma_deviation": dgamma,
        "gamma_ok": bool(dgamma <= GAMMA_ATOL),
        "local_map_deviation": dmap,
        "local_map_ok": bool(dmap <= LOCAL_MAP_ATOL),
    }


def run_pipeline(cfg: ScenarioConfig, mode: str = "centralized") -> PipelineResult:
    """Generate data, fit the ML hyperparameters, then regress on the grid.

    In distributed mode every solve runs in the simulated network, the MAP
    mean and the posterior variances come from local queries, and the
    result is checked against the centralized estimator; only the posterior
    variances (not the off-diagonal covariance) are computed in-network.
    """
    if mode not in ("centralized", "distributed"):
        raise InvalidInputError(f"mode must be centralized or distributed, got {mode!r}")
    problem = build_problem(cfg)
    dyn, system, grid = problem.dynamics, problem.system, problem.grid
    central = fit_ml_multistart(dyn, system, problem.init, problem.solver)
    trace = comparison = None
    if mode == "centralized":
        ml = central
        posterior = map_posterior(ml, dyn, system, grid)
    else:
        net = Network(problem.observations.locations, system.stats, problem.kernel, dyn)
        ml = net.fit_ml_multistart(problem.init, problem.solver)
        comparison = compare_fits(problem, central, ml, net)
        mean = np.array([net.local_map(grid, m) for m in range(grid.m)])
        var = np.array([net.local_variance(grid, m, tol=problem.solver.cg_tol) for m in range(grid.m)])
        posterior = Posterior.from_moments(mean, np.diag(var))
        trace = net.trace
        failed = [k for k, v in comparison.items() if k.endswith("_ok") and not v]
        if failed:
            raise ToleranceError(f"distributed result deviates from centralized: {failed} {comparison}")
    prior = regression_prior_mean(dyn, ml, grid)
    truth_values = problem.truth(grid.coords)
    metrics = trial_metrics(truth_values, prior, posterior, ml.gamma_ml, problem.true_gamma)
    return PipelineResult(problem, mode, ml, prior, posterior, metrics, trace, comparison)


# --------------------------------------------------------------------------
# Monte Carlo
# --------------------------------------------------------------------------


def monte_carlo(cfg: ScenarioConfig, trials: int, mode: str = "centralized") -> dict:
    """Repeat the pipeline with seeds ``seed, seed + 1, ...`` and aggregate."""
    if trials < 1:
        raise InvalidInputError("trials must be >= 1")
    per_trial = []
    inside = points = 0
    for t in range(trials):
        res = run_pipeline(cfg.with_seed(cfg.seed + t), mode)
        truth = res.truth_on_grid
        hit = (res.posterior.lower95 <= truth) & (truth <= res.posterior.upper95)
        inside += int(hit.sum())
        points += hit.size
        per_trial.append((res.metrics, res.ml.converged))

    def stats(values):
        arr = np.asarray(values, dtype=float)
        return {"mean": np.mean(arr, axis=0).tolist(), "std": np.std(arr, axis=0).tolist()}

    metrics = [m for m, _ in per_trial]
    report = {
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "trials": trials,
        "mode": mode,
        "rmse_map": stats([m.rmse_map for m in metrics]),
        "rmse_prior": stats([m.rmse_prior for m in metrics]),
        "coverage95": stats([m.coverage95 for m in metrics]),
        "pooled_coverage95": inside / points,
        "converged_fraction": sum(c for _, c in per_trial) / trials,
    }
    if metrics[0].gamma_error is not None:
        report["gamma_error"] = stats([m.gamma_error for m in metrics])
    return report
