"""Shared fixtures, random-scenario builders and the acceptance summary."""

from __future__ import annotations

import numpy as np
import pytest

from ebfield import CompactKernel, ObservationSet, Poisson1D, RegressionGrid, TrainSystem
from ebfield.dynamics import NaturalSpline
from ebfield.model import sufficient_stats

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str, str]] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[number] = (bool(passed), title, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, title, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(
            f"{'PASS' if passed else 'FAIL'}  criterion {number:2d}: {title} -- {detail}")


def random_observations(rng: np.random.Generator, locations, noise_variance=None,
                        max_samples=4, scale=1.0) -> ObservationSet:
    locations = np.asarray(locations, dtype=float)
    noise = float(rng.uniform(0.05, 2.0)) if noise_variance is None else noise_variance
    obs = [list(scale * rng.standard_normal(int(rng.integers(1, max_samples + 1))))
           for _ in locations]
    return ObservationSet.from_arrays(locations, obs, noise)


def random_uniform_locations(rng: np.random.Generator, n: int) -> np.ndarray:
    start = rng.uniform(-3.0, 3.0)
    step = rng.uniform(0.2, 1.5)
    return start + step * np.arange(n)


def random_scattered_locations(rng: np.random.Generator, n: int) -> np.ndarray:
    gaps = rng.uniform(0.2, 2.0, size=n - 1)
    return rng.uniform(-3.0, 3.0) + np.concatenate([[0.0], np.cumsum(gaps)])


def random_problem(rng: np.random.Generator, kind: str, n: int):
    """Observations, kernel, dynamics, train system and grid for a small scenario."""
    if kind == "poisson":
        s = random_uniform_locations(rng, max(n, 3))
        dyn = Poisson1D(s, boundary=tuple(rng.uniform(-2, 2, size=2)))
    else:
        s = np.sort(random_scattered_locations(rng, n))
        q = int(rng.integers(2, max(3, n + 1)))
        knots = np.sort(rng.choice(s, size=min(q, s.size), replace=False))
        if knots.size < 2:
            knots = np.array([s[0] - 1.0, s[0] + 1.0])
        dyn = NaturalSpline(s, knots)
    obs = random_observations(rng, s)
    support = rng.uniform(1.0, 3.0) * float(np.max(np.diff(s))) if s.size > 1 else 1.0
    kernel = CompactKernel(float(rng.uniform(0.2, 3.0)), support)
    system = TrainSystem(kernel, obs.locations, sufficient_stats(obs))
    inside = rng.uniform(s[0], s[-1], size=7)
    grid = RegressionGrid(np.sort(np.concatenate([inside, s[[0, -1]]])))
    return obs, kernel, dyn, system, grid


def random_gamma(rng: np.random.Generator, dyn) -> np.ndarray:
    if isinstance(dyn, Poisson1D):
        return np.array([rng.uniform(0.5, 8.0), rng.uniform(0.5, 4.0), rng.uniform(-3.0, 3.0)])
    return rng.uniform(-3.0, 3.0, size=dyn.n_params)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
