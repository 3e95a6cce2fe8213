"""Sensors, observations, sufficient statistics and the interaction graph."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .kernel import CompactKernel, _as_points, _pairs_within


@dataclass(frozen=True)
class SensorRecord:
    id: int
    location: tuple[float, ...]
    observations: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "location", tuple(float(v) for v in np.atleast_1d(self.location)))
        object.__setattr__(self, "observations", tuple(float(v) for v in self.observations))
        if len(self.observations) < 1:
            raise InvalidInputError(f"sensor {self.id} has no observations")
        if not all(math.isfinite(v) for v in self.observations):
            raise InvalidInputError(f"sensor {self.id} has non-finite observations")
        if not all(math.isfinite(v) for v in self.location):
            raise InvalidInputError(f"sensor {self.id} has a non-finite location")

    @property
    def n_obs(self) -> int:
        return len(self.observations)


@dataclass(frozen=True)
class ObservationSet:
    """All sensors of a scenario, ordered by id (1-based, no gaps).

    Duplicate locations and a non-positive noise variance are *not* rejected
    here; ``validate_scenario`` reports them.
    """

    sensors: tuple[SensorRecord, ...]
    noise_variance: float
    dimension: int = 1

    def __post_init__(self):
        object.__setattr__(self, "sensors", tuple(self.sensors))
        ids = [s.id for s in self.sensors]
        if ids != list(range(1, len(ids) + 1)):
            raise InvalidInputError(f"sensor ids must be 1..N in order, got {ids}")
        for s in self.sensors:
            if len(s.location) != self.dimension:
                raise InvalidInputError(
                    f"sensor {s.id} location has dimension {len(s.location)}, expected {self.dimension}")

    @classmethod
    def from_arrays(cls, locations, observations: Sequence[Sequence[float]], noise_variance: float):
        pts = _as_points(locations)
        if len(observations) != pts.shape[0]:
            raise InvalidInputError("one observation list per location is required")
        sensors = tuple(SensorRecord(i + 1, tuple(pts[i]), tuple(observations[i]))
                        for i in range(pts.shape[0]))
        return cls(sensors, float(noise_variance), pts.shape[1])

    @property
    def n(self) -> int:
        return len(self.sensors)

    @property
    def locations(self) -> np.ndarray:
        return np.array([s.location for s in self.sensors], dtype=float).reshape(self.n, self.dimension)

    @property
    def counts(self) -> np.ndarray:
        return np.array([s.n_obs for s in self.sensors], dtype=int)


@dataclass(frozen=True)
class SufficientStats:
    xbar: np.ndarray
    d_diag: np.ndarray


def sufficient_stats(obs: ObservationSet) -> SufficientStats:
    """Per-node sample means and the noise diagonal ``sigma^2 / L_i``."""
    if not obs.noise_variance > 0:
        raise InvalidInputError("noise variance must be positive")
    xbar = np.empty(obs.n)
    d = np.empty(obs.n)
    for i, s in enumerate(obs.sensors):
        if s.n_obs == 0:
            raise InvalidInputError(f"sensor {s.id} has no observations")
        xbar[i] = math.fsum(s.observations) / s.n_obs
        d[i] = obs.noise_variance / s.n_obs
    return SufficientStats(xbar, d)


@dataclass(frozen=True)
class InteractionGraph:
    """Undirected graph; ``neighbor_sets[i]`` contains ``i`` itself."""

    n: int
    neighbor_sets: tuple[frozenset, ...]

    def neighbors(self, i: int) -> list[int]:
        return sorted(self.neighbor_sets[i])

    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.n) for j in sorted(self.neighbor_sets[i]) if i < j]

    @property
    def n_edges(self) -> int:
        return len(self.edges())

    def is_symmetric(self) -> bool:
        return all(i in self.neighbor_sets[j] for i in range(self.n) for j in self.neighbor_sets[i])

    def has_self_loops(self) -> bool:
        return all(i in self.neighbor_sets[i] for i in range(self.n))

    def components(self) -> list[list[int]]:
        seen, comps = set(), []
        for start in range(self.n):
            if start in seen:
                continue
            comp, stack = [], [start]
            seen.add(start)
            while stack:
                u = stack.pop()
                comp.append(u)
                for v in self.neighbor_sets[u]:
                    if v not in seen:
                        seen.add(v)
                        stack.append(v)
            comps.append(sorted(comp))
        return comps


def build_interaction_graph(locations, kernel: CompactKernel) -> InteractionGraph:
    """j is a neighbor of i iff K(s_i, s_j) is structurally nonzero."""
    pts = _as_points(locations)
    n = pts.shape[0]
    rows, cols = _pairs_within(pts, pts, kernel.support_length)
    sets = [{i} for i in range(n)]
    for i, j in zip(rows, cols):
        sets[i].add(int(j))
        sets[j].add(int(i))
    return InteractionGraph(n, tuple(frozenset(s) for s in sets))


@dataclass(frozen=True)
class RegressionGrid:
    points: np.ndarray = field(repr=False)

    def __post_init__(self):
        pts = _as_points(self.points)
        if pts.shape[0] < 1:
            raise InvalidInputError("regression grid needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("regression grid has non-finite points")
        object.__setattr__(self, "points", pts)

    @classmethod
    def linspace(cls, lo: float, hi: float, count: int):
        return cls(np.linspace(lo, hi, int(count)))

    @property
    def m(self) -> int:
        return self.points.shape[0]

    @property
    def coords(self) -> np.ndarray:
        """First coordinate of every point (the natural axis for 1-D grids)."""
        return self.points[:, 0]


def validate_scenario(obs: ObservationSet, grid: RegressionGrid | None = None,
                      graph: InteractionGraph | None = None) -> list[str]:
    """Collect every consistency violation; an empty list means valid."""
    problems: list[str] = []
    if not (math.isfinite(obs.noise_variance) and obs.noise_variance > 0):
        problems.append(f"noise variance must be positive, got {obs.noise_variance}")
    seen: dict[tuple, int] = {}
    for s in obs.sensors:
        if s.location in seen:
            problems.append(f"sensors {seen[s.location]} and {s.id} share location {s.location}")
        else:
            seen[s.location] = s.id
    if grid is not None and grid.points.shape[1] != obs.dimension:
        problems.append(f"grid dimension {grid.points.shape[1]} != sensor dimension {obs.dimension}")
    if graph is not None:
        if graph.n != obs.n:
            problems.append(f"graph has {graph.n} nodes but there are {obs.n} sensors")
        else:
            for i in range(graph.n):
                if i not in graph.neighbor_sets[i]:
                    problems.append(f"node {i + 1} is missing its self-loop")
                for j in graph.neighbor_sets[i]:
                    if not 0 <= j < graph.n:
                        problems.append(f"node {i + 1} lists unknown neighbor {j + 1}")
                    elif i not in graph.neighbor_sets[j]:
                        problems.append(f"edge {i + 1}->{j + 1} has no reverse edge")
    return problems
