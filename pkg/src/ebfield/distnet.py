"""Synchronous message-passing simulation of the distributed estimator.

Every node keeps only its own location, sample mean, noise level, kernel
row ``{K(s_i, s_j) : j in N_i}`` and, for implicit mean models, its row of
the discretized dynamics.  Data moves only through

* neighbor exchanges along interaction-graph edges (one round each),
* exact sums over a BFS spanning tree (reduce up, broadcast down),
* root broadcasts of the replicated hyperparameter vector.

On top of those primitives the network runs conjugate gradients for
``(K_ss + D) z = mu - xbar``, the Gauss-Newton loop for the ML
hyperparameters (the root decides steps), and local MAP queries.
"""

from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .dynamics import Hyperparameters, Poisson1D, SpatialDynamics
from .errors import ConvergenceError, DisconnectedGraphError, InvalidInputError
from .estimator import MLResult, SolverConfig, _Eval, pick_best, projected_gauss_newton, start_points
from .kernel import CompactKernel, kernel_eval
from .model import InteractionGraph, RegressionGrid, SufficientStats, build_interaction_graph


# --------------------------------------------------------------------------
# Spanning tree
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SpanningTree:
    parent: tuple[Optional[int], ...]
    children: tuple[tuple[int, ...], ...]
    level: tuple[int, ...]
    root: int = 0

    @property
    def n(self) -> int:
        return len(self.parent)

    @property
    def depth(self) -> int:
        return max(self.level, default=0)

    def nodes_at(self, depth: int) -> list[int]:
        return [i for i, d in enumerate(self.level) if d == depth]

    def edges(self) -> set[tuple[int, int]]:
        return {(min(i, p), max(i, p)) for i, p in enumerate(self.parent) if p is not None}


def build_tree(graph: InteractionGraph, root: int = 0) -> SpanningTree:
    """BFS tree exploring neighbors in increasing id order."""
    comps = graph.components()
    if len(comps) > 1:
        raise DisconnectedGraphError([[i + 1 for i in c] for c in comps])
    parent: list[Optional[int]] = [None] * graph.n
    level = [0] * graph.n
    seen = {root}
    order = deque([root])
    while order:
        u = order.popleft()
        for v in graph.neighbors(u):
            if v not in seen:
                seen.add(v)
                parent[v] = u
                level[v] = level[u] + 1
                order.append(v)
    children = [[] for _ in range(graph.n)]
    for v, p in enumerate(parent):
        if p is not None:
            children[p].append(v)
    return SpanningTree(tuple(parent), tuple(tuple(sorted(c)) for c in children), tuple(level), root)


def tree_sum(tree: SpanningTree, values: Sequence):
    """Centralized sum in the exact order the tree reduction uses."""

    def subtotal(u):
        acc = values[u]
        for c in tree.children[u]:
            acc = acc + subtotal(c)
        return acc

    return subtotal(tree.root)


# --------------------------------------------------------------------------
# Messages and traces
# --------------------------------------------------------------------------

NEIGHBOR_EXCHANGE = "neighbor-exchange"
REDUCE_UP = "reduce-up"
BROADCAST_DOWN = "broadcast-down"
QUERY_REPLY = "query-reply"


@dataclass(frozen=True, slots=True)
class Message:
    round: int
    sender: int
    receiver: object  # node index, or a label for a virtual query point
    kind: str
    phase: str
    payload: tuple


@dataclass
class NetworkTrace:
    messages: list[Message] = field(default_factory=list)
    round_phase: dict[int, str] = field(default_factory=dict)

    @property
    def rounds(self) -> int:
        return len(self.round_phase)

    @property
    def total_messages(self) -> int:
        return len(self.messages)

    @property
    def total_scalars(self) -> int:
        return sum(len(m.payload) for m in self.messages)

    def per_round(self) -> list[tuple[int, str, int, int]]:
        counts: dict[int, list[int]] = {r: [0, 0] for r in self.round_phase}
        for m in self.messages:
            counts[m.round][0] += 1
            counts[m.round][1] += len(m.payload)
        return [(r, self.round_phase[r], c[0], c[1]) for r, c in sorted(counts.items())]

    def per_phase(self) -> dict[str, tuple[int, int]]:
        out: dict[str, list[int]] = {}
        for m in self.messages:
            c = out.setdefault(m.phase, [0, 0])
            c[0] += 1
            c[1] += len(m.payload)
        return {k: (v[0], v[1]) for k, v in out.items()}

    def pairs(self) -> set[tuple[int, object]]:
        return {(m.sender, m.receiver) for m in self.messages}

    def to_csv(self, stream=None) -> str:
        buf = io.StringIO() if stream is None else stream
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "phase", "messages", "scalars_sent"])
        for row in self.per_round():
            w.writerow(row)
        return buf.getvalue() if stream is None else ""


@dataclass
class SolveInfo:
    iterations: int
    residuals: list[float]
    messages: int


# --------------------------------------------------------------------------
# Nodes and network
# --------------------------------------------------------------------------


@dataclass
class NodeState:
    id: int
    location: tuple[float, ...]
    xbar: float
    noise: float  # sigma^2 / L_i
    kernel_row: dict[int, float]
    dyn_row: dict[int, float] = field(default_factory=dict)
    gamma: Optional[np.ndarray] = None
    mu: float = 0.0
    z: float = 0.0


class Network:
    """A simulated sensor network holding one :class:`NodeState` per sensor."""

    def __init__(self, locations, stats: SufficientStats, kernel: CompactKernel,
                 dynamics: Optional[SpatialDynamics] = None):
        pts = np.asarray(locations, dtype=float)
        pts = pts[:, None] if pts.ndim == 1 else pts
        self.kernel = kernel
        self.dynamics = dynamics
        self.graph = build_interaction_graph(pts, kernel)
        self.tree = build_tree(self.graph)
        self.n = pts.shape[0]
        self.nodes: list[NodeState] = []
        for i in range(self.n):
            row = {j: kernel_eval(kernel, pts[i], pts[j]) for j in self.graph.neighbors(i)}
            self.nodes.append(NodeState(i, tuple(pts[i]), float(stats.xbar[i]),
                                        float(stats.d_diag[i]), row))
        self._kernel_adj = [[j for j in self.graph.neighbors(i) if j != i] for i in range(self.n)]
        self._dyn_adj: list[list[int]] = [[] for _ in range(self.n)]
        if dynamics is not None and not dynamics.explicit:
            self._install_dynamics_rows(dynamics)
        self._allowed = set(self.graph.edges()) | self.tree.edges()
        self.round = 0
        self.trace = NetworkTrace()

    @classmethod
    def from_observations(cls, obs, kernel: CompactKernel, dynamics=None) -> "Network":
        from .model import sufficient_stats
        return cls(obs.locations, sufficient_stats(obs), kernel, dynamics)

    def _install_dynamics_rows(self, dyn: SpatialDynamics):
        if not isinstance(dyn, Poisson1D):
            raise InvalidInputError(f"no distributed mean solve for {type(dyn).__name__}")
        s = dyn.symmetric_system().tocsr()
        for i in range(self.n):
            row = {}
            for ptr in range(s.indptr[i], s.indptr[i + 1]):
                if s.data[ptr] != 0.0:
                    row[int(s.indices[ptr])] = float(s.data[ptr])
            missing = [j for j in row if j not in self.graph.neighbor_sets[i]]
            if missing:
                raise InvalidInputError(
                    f"dynamics couple node {i + 1} to {[j + 1 for j in missing]}, which are not "
                    "interaction neighbors; increase the kernel support")
            self.nodes[i].dyn_row = dict(sorted(row.items()))
            self._dyn_adj[i] = [j for j in sorted(row) if j != i]

    # -- communication primitives ------------------------------------------

    def _deliver(self, sends: list[tuple[int, object, tuple]], kind: str, phase: str):
        if not sends:
            return
        self.round += 1
        self.trace.round_phase[self.round] = phase
        for sender, receiver, payload in sends:
            if kind != QUERY_REPLY:
                edge = (min(sender, receiver), max(sender, receiver))
                assert edge in self._allowed, f"message {sender}->{receiver} off the graph"
            self.trace.messages.append(Message(self.round, sender, receiver, kind, phase, payload))

    def exchange(self, values: Sequence[float], phase: str, adjacency: str = "kernel") -> list[dict[int, float]]:
        """One round: every node sends its value to each neighbor.

        Returns, per node, the values it now knows (its own plus received).
        """
        adj = self._kernel_adj if adjacency == "kernel" else self._dyn_adj
        sends = [(i, j, (float(values[i]),)) for i in range(self.n) for j in adj[i]]
        self._deliver(sends, NEIGHBOR_EXCHANGE, phase)
        inbox: list[dict[int, float]] = [{i: float(values[i])} for i in range(self.n)]
        for i, j, payload in sends:
            inbox[j][i] = payload[0]
        return inbox

    def allreduce(self, values: Sequence, phase: str) -> list:
        """Exact tree sum delivered to every node; ``2 (N - 1)`` messages."""
        tree = self.tree
        vector = np.ndim(values[0]) > 0
        pack = (lambda v: tuple(float(x) for x in v)) if vector else (lambda v: (float(v),))
        subtotal = [None] * self.n
        for depth in range(tree.depth, -1, -1):
            sends = []
            for u in tree.nodes_at(depth):
                acc = np.array(values[u], dtype=float) if vector else float(values[u])
                for c in tree.children[u]:
                    acc = acc + subtotal[c]
                subtotal[u] = acc
                if depth > 0:
                    sends.append((u, tree.parent[u], pack(acc)))
            self._deliver(sends, REDUCE_UP, phase)
        total = subtotal[tree.root]
        result = [None] * self.n
        result[tree.root] = total
        for depth in range(tree.depth):
            sends = []
            for u in tree.nodes_at(depth):
                for c in tree.children[u]:
                    sends.append((u, c, pack(result[u])))
                    result[c] = np.array(result[u]) if vector else result[u]
            self._deliver(sends, BROADCAST_DOWN, phase)
        return result

    def broadcast(self, value, phase: str) -> list:
        """Root value copied to every node down the tree; ``N - 1`` messages."""
        tree = self.tree
        vector = np.ndim(value) > 0
        result = [None] * self.n
        result[tree.root] = np.array(value, dtype=float) if vector else float(value)
        for depth in range(tree.depth):
            sends = []
            for u in tree.nodes_at(depth):
                for c in tree.children[u]:
                    payload = tuple(float(x) for x in np.atleast_1d(result[u]))
                    sends.append((u, c, payload))
                    result[c] = np.array(result[u]) if vector else result[u]
            self._deliver(sends, BROADCAST_DOWN, phase)
        return result

    # -- linear algebra ------------------------------------------------------

    def matvec(self, v: Sequence[float], phase: str = "matvec") -> np.ndarray:
        """Node i ends with ``(sigma^2/L_i) v_i + sum_j K(s_i, s_j) v_j``."""
        inbox = self.exchange(v, phase)
        out = np.empty(self.n)
        for node in self.nodes:
            known = inbox[node.id]
            acc = node.noise * known[node.id]
            for j, kij in node.kernel_row.items():
                acc += kij * known[j]
            out[node.id] = acc
        return out

    def dyn_matvec(self, v: Sequence[float], phase: str = "dyn-matvec") -> np.ndarray:
        inbox = self.exchange(v, phase, adjacency="dynamics")
        out = np.empty(self.n)
        for node in self.nodes:
            known = inbox[node.id]
            acc = 0.0
            for j, sij in node.dyn_row.items():
                acc += sij * known[j]
            out[node.id] = acc
        return out

    def solve(self, rhs: Sequence[float], tol: float = 1e-10, max_iters: Optional[int] = None,
              phase: str = "cg", system: str = "kernel") -> tuple[np.ndarray, SolveInfo]:
        """Conjugate gradients; one neighbor round and two tree sums per iteration."""
        op = self.matvec if system == "kernel" else self.dyn_matvec
        max_iters = 5 * self.n if max_iters is None else max_iters
        start_msgs = self.trace.total_messages
        x = np.zeros(self.n)
        r = np.array(rhs, dtype=float)
        p = r.copy()
        rr = self.allreduce(r * r, phase)[self.tree.root]
        target = tol * np.sqrt(rr)
        residuals = [float(np.sqrt(rr))]
        it = 0
        while np.sqrt(rr) > target:
            if it >= max_iters:
                raise ConvergenceError(
                    f"CG did not reach tol {tol} within {max_iters} iterations", residuals)
            q = op(p, phase)
            pq = self.allreduce(p * q, phase)[self.tree.root]
            alpha = rr / pq
            x += alpha * p
            r -= alpha * q
            rr_new = self.allreduce(r * r, phase)[self.tree.root]
            p = r + (rr_new / rr) * p
            rr = rr_new
            residuals.append(float(np.sqrt(rr)))
            it += 1
        return x, SolveInfo(it, residuals, self.trace.total_messages - start_msgs)

    # -- ML fit ----------------------------------------------------------------

    def _local_mean(self, gamma, tol: float) -> np.ndarray:
        dyn = self.dynamics
        if dyn.explicit:
            return np.array([dyn.local_mean(i, gamma) for i in range(self.n)])
        rhs = np.array([dyn.symmetric_rhs(i, gamma) for i in range(self.n)])
        mu, _ = self.solve(rhs, tol=tol, phase="cg-mean", system="dynamics")
        return mu

    def _local_jacobian(self, gamma, tol: float) -> np.ndarray:
        dyn = self.dynamics
        if dyn.explicit:
            return dyn.train_basis.copy()
        drhs = np.array([dyn.symmetric_rhs_jacobian(i, gamma) for i in range(self.n)])
        cols = [self.solve(drhs[:, k], tol=tol, phase="cg-jacobian", system="dynamics")[0]
                for k in range(drhs.shape[1])]
        return np.column_stack(cols)

    def _callbacks(self, cfg: SolverConfig):
        def evaluate(gamma):
            copies = self.broadcast(np.asarray(gamma, dtype=float), "gamma-broadcast")
            for node, g in zip(self.nodes, copies):
                node.gamma = g
            mu = self._local_mean(gamma, cfg.cg_tol)
            xbar = np.array([nd.xbar for nd in self.nodes])
            z, _ = self.solve(mu - xbar, tol=cfg.cg_tol, phase="cg-z")
            az = self.matvec(z, "cost-exchange")
            cost = self.allreduce(z * az, "cost-sum")[self.tree.root]
            for node in self.nodes:
                node.mu, node.z = float(mu[node.id]), float(z[node.id])
            return _Eval(float(cost), z, mu)

        def derivatives(gamma, ev):
            jac = self._local_jacobian(gamma, cfg.cg_tol)
            grad = self.allreduce(2.0 * jac * ev.z[:, None], "gradient")[self.tree.root]
            p = jac.shape[1]
            gn = np.empty((p, p))
            for k in range(p):
                wk, _ = self.solve(jac[:, k], tol=cfg.cg_tol, phase="cg-gn")
                gn[:, k] = self.allreduce(jac * wk[:, None], "gn-matrix")[self.tree.root]
            return np.asarray(grad), gn

        return evaluate, derivatives

    def fit_ml(self, init: Hyperparameters, cfg: SolverConfig = SolverConfig()) -> MLResult:
        """Gauss-Newton on the ML cost with every solve done in-network."""
        if self.dynamics is None:
            raise InvalidInputError("network was built without a dynamics model")
        if not init.within_bounds():
            raise InvalidInputError(f"initial hyperparameters {init.values} outside the box")
        evaluate, derivatives = self._callbacks(cfg)
        res = projected_gauss_newton(evaluate, derivatives, init, cfg)
        # leave every node holding the state of the returned iterate
        final = evaluate(res.gamma_ml)
        res.z, res.mu, res.cost = final.z, final.mu, final.cost
        res.diagnostics["messages"] = self.trace.total_messages
        res.diagnostics["rounds"] = self.round
        return res

    def fit_ml_multistart(self, init: Hyperparameters, cfg: SolverConfig = SolverConfig()) -> MLResult:
        if self.dynamics.linear:
            return self.fit_ml(init, cfg)
        results = [self.fit_ml(s, cfg) for s in start_points(init, cfg)]
        best = pick_best(results)
        final = self._callbacks(cfg)[0](best.gamma_ml)
        best.z, best.mu, best.cost = final.z, final.mu, final.cost
        return best

    # -- local MAP -----------------------------------------------------------

    def effective_neighbors(self, point) -> list[int]:
        pt = np.atleast_1d(np.asarray(point, dtype=float))
        return [j for j in range(self.n) if kernel_eval(self.kernel, pt, self.nodes[j].location) != 0.0]

    def _reach(self, querying: Optional[int], point) -> set[int]:
        if querying is None:
            return set(self.effective_neighbors(point))
        return set(self.graph.neighbor_sets[querying])

    def _fetch(self, senders: Iterable[int], querying: Optional[int], label, payloads, phase) -> None:
        receiver = label if querying is None else querying
        sends = [(j, receiver, payloads[j]) for j in senders if j != querying]
        self._deliver(sends, QUERY_REPLY, phase)

    def local_map(self, grid: RegressionGrid, m: int, querying: Optional[int] = None) -> float:
        """MAP value at grid point ``m`` from the z values of kernel neighbors.

        ``querying=None`` models a computing node placed at the regression
        point (it reaches exactly the sensors within kernel support);
        otherwise sensor ``querying`` answers using only its neighbors.
        """
        point = grid.points[m]
        ne = self.effective_neighbors(point)
        reach = self._reach(querying, point)
        prior, mean_sources = self._regression_prior(grid, m)
        needed = set(ne) | set(mean_sources)
        if not needed <= reach:
            outside = sorted(needed - reach)
            raise InvalidInputError(
                f"grid point {m} needs nodes {[j + 1 for j in outside]} outside the querying node's reach")
        label = f"R{m}"
        gamma_vals = np.atleast_1d(self.nodes[0].gamma)
        self._fetch(mean_sources, querying, label,
                    {j: (self.nodes[j].mu, *map(float, gamma_vals)) for j in mean_sources}, "map-mean")
        self._fetch(ne, querying, label, {j: (self.nodes[j].z,) for j in ne}, "map-z")
        acc = 0.0
        for j in ne:
            acc += kernel_eval(self.kernel, point, self.nodes[j].location) * self.nodes[j].z
        return prior - acc

    def _regression_prior(self, grid: RegressionGrid, m: int) -> tuple[float, list[int]]:
        """Prior mean at grid point m and the sensors whose mu it needs."""
        dyn = self.dynamics
        gamma = self.nodes[0].gamma
        if dyn.explicit:
            # gamma is replicated; the value is computed from the basis alone
            return float(dyn.basis(grid.coords[m:m + 1])[0] @ gamma), []
        coincident, groups = dyn.split_grid(grid.coords)
        if m in coincident:
            j = coincident[m]
            return self.nodes[j].mu, [j]
        for i, idx in groups.items():
            if m in idx:
                pts = grid.coords[idx]
                order = np.argsort(pts, kind="stable")
                vals = dyn.fill_interval(i, self.nodes[i].mu, self.nodes[i + 1].mu, pts[order], gamma)
                return float(vals[list(np.asarray(idx)[order]).index(m)]), [i, i + 1]
        raise InvalidInputError(f"grid point {m} not covered by the dynamics domain")

    def local_variance(self, grid: RegressionGrid, m: int, tol: float = 1e-12) -> float:
        """Posterior variance at grid point ``m`` via one in-network CG solve."""
        point = grid.points[m]
        ne = self.effective_neighbors(point)
        k_row = np.zeros(self.n)
        for j in ne:
            k_row[j] = kernel_eval(self.kernel, point, self.nodes[j].location)
        prior = kernel_eval(self.kernel, point, point)
        if not ne:
            return prior
        v, _ = self.solve(k_row, tol=tol, phase="cg-variance")
        self._fetch(ne, None, f"R{m}", {j: (float(v[j]),) for j in ne}, "map-variance")
        acc = 0.0
        for j in ne:
            acc += k_row[j] * v[j]
        return prior - acc


def per_iteration_messages(graph: InteractionGraph) -> int:
    """Closed-form CG message count: one neighbor round plus two tree sums."""
    return 2 * graph.n_edges + 4 * (graph.n - 1)
