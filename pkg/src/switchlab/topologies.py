"""Generators for concrete switched networks."""

from __future__ import annotations

import dataclasses
import itertools
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ResourcePolytope, ScheduleSet, from_json, load, monotone_close, solve_primal, to_json
from .errors import CapacityError, ContractError, DomainError

MAX_SWITCH_PORTS = 4
MAX_GRAPH_NODES = 16
MAX_POOL = 8


@dataclass(frozen=True)
class Topology:
    name: str
    schedule_set: ScheduleSet
    polytope: ResourcePolytope
    labels: tuple
    # True when conv(S) == {x in [0,1]^N : R x <= C}, so the R,C load equals the LP load.
    exact_polytope: bool = True

    def __post_init__(self):
        if not self.polytope.admits(self.schedule_set):
            raise ContractError(f"{self.name}: some schedule violates R sigma <= C")

    @property
    def n_queues(self) -> int:
        return self.schedule_set.n_queues

    @property
    def rank(self) -> int:
        return self.polytope.rank

    @property
    def k_max(self) -> int:
        return self.schedule_set.k_max

    def load(self, vector) -> float:
        """Load over the schedule set; uses the R,C formula only when it is exact."""
        if self.exact_polytope:
            return load(vector, self.polytope)
        return solve_primal(vector, self.schedule_set).total

    def to_json(self) -> dict:
        doc = to_json(self.schedule_set, self.polytope)
        doc["name"] = self.name
        doc["labels"] = [list(x) if isinstance(x, tuple) else x for x in self.labels]
        doc["exact_polytope"] = self.exact_polytope
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "Topology":
        sset, polytope = from_json(doc)
        if polytope is None:
            raise DomainError("topology document needs R and C")
        labels = tuple(tuple(x) if isinstance(x, list) else x for x in doc.get("labels", range(sset.n_queues)))
        return cls(doc.get("name", "custom"), sset, polytope, labels, bool(doc.get("exact_polytope", True)))


def iq_switch(n: int) -> Topology:
    """n x n input-queued switch; queue k*n + l holds packets from input k to output l."""
    if n < 1:
        raise DomainError("switch needs at least one port")
    if n > MAX_SWITCH_PORTS:
        raise CapacityError(f"iq_switch enumerates schedules explicitly; n <= {MAX_SWITCH_PORTS}")
    N = n * n
    matchings = []
    for perm in itertools.permutations(range(n)):
        sigma = [0] * N
        for k, l in enumerate(perm):
            sigma[k * n + l] = 1
        matchings.append(sigma)
    sset = monotone_close(matchings, N)
    R = np.zeros((2 * n, N))
    for k in range(n):
        for l in range(n):
            R[k, k * n + l] = 1.0  # input port k
            R[n + l, k * n + l] = 1.0  # output port l
    labels = tuple((k + 1, l + 1) for k in range(n) for l in range(n))
    return Topology(f"iq:{n}", sset, ResourcePolytope(R, np.ones(2 * n)), labels)


def independent_set(adjacency, name: str = "independent-set") -> Topology:
    """Interference graph model: schedules are independent sets, one resource per edge."""
    adj = np.asarray(adjacency)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise DomainError("adjacency must be a square matrix")
    if not np.array_equal(adj, adj.T):
        raise DomainError("adjacency must be symmetric")
    if np.any((adj != 0) & (adj != 1)):
        raise DomainError("adjacency entries must be 0 or 1")
    n = adj.shape[0]
    if n > MAX_GRAPH_NODES:
        raise CapacityError(f"independent_set is limited to {MAX_GRAPH_NODES} nodes")
    adj = adj.astype(bool) & ~np.eye(n, dtype=bool)
    edges = [(a, b) for a in range(n) for b in range(a + 1, n) if adj[a, b]]
    scheds = []
    for mask in range(1 << n):
        nodes = [i for i in range(n) if mask >> i & 1]
        if all(not adj[a, b] for a, b in itertools.combinations(nodes, 2)):
            scheds.append(tuple(int(mask >> i & 1) for i in range(n)))
    sset = ScheduleSet(tuple(scheds), n)
    rows = []
    for a, b in edges:
        row = np.zeros(n)
        row[[a, b]] = 1.0
        rows.append(row)
    # isolated nodes still need a resource row; use the box constraint x_i <= 1
    for i in range(n):
        if not adj[i].any():
            row = np.zeros(n)
            row[i] = 1.0
            rows.append(row)
    R = np.array(rows).reshape(-1, n)
    topo = Topology(name, sset, ResourcePolytope(R, np.ones(R.shape[0])), tuple(range(1, n + 1)))
    exact = _polytope_is_exact(topo)
    if not exact:
        warnings.warn(
            f"{name}: edge constraints do not describe conv(S); "
            "policy computations use the schedule-set LP",
            stacklevel=2,
        )
    return Topology(name, sset, topo.polytope, topo.labels, exact)


def _polytope_is_exact(topo: Topology, samples: int = 64, seed: int = 0) -> bool:
    """Compare the R,C load with the schedule-set LP load on sampled directions."""
    rng = np.random.default_rng(seed)
    n = topo.n_queues
    points = [np.ones(n)] + [rng.random(n) for _ in range(samples)]
    for x in points:
        if abs(load(x, topo.polytope) - solve_primal(x, topo.schedule_set).total) > 1e-7:
            return False
    return True


def parallel_vs_pooled(n: int) -> tuple[Topology, Topology]:
    """n independent unit servers versus one server shared by n queues."""
    if n < 1:
        raise DomainError("need at least one queue")
    if n > MAX_POOL:
        raise CapacityError(f"parallel_vs_pooled is limited to n <= {MAX_POOL}")
    parallel = Topology(
        f"parallel:{n}",
        monotone_close([(1,) * n], n),
        ResourcePolytope(np.eye(n), np.ones(n)),
        tuple(range(1, n + 1)),
    )
    pooled = Topology(
        f"pooled:{n}",
        monotone_close([], n),
        ResourcePolytope(np.ones((1, n)), np.ones(1)),
        tuple(range(1, n + 1)),
    )
    return parallel, pooled


def single_queue() -> Topology:
    return dataclasses.replace(parallel_vs_pooled(1)[0], name="single")


def from_spec(spec: str) -> Topology:
    """Parse a CLI topology string such as ``iq:3``, ``pooled:4`` or ``independent-set:<file>``."""
    kind, _, arg = spec.partition(":")
    kind = kind.strip().lower()
    try:
        if kind == "iq":
            return iq_switch(int(arg))
        if kind == "pooled":
            return parallel_vs_pooled(int(arg))[1]
        if kind == "parallel":
            return parallel_vs_pooled(int(arg))[0]
        if kind == "single":
            return single_queue()
        if kind == "independent-set":
            text = Path(arg).read_text()
            doc = json.loads(text)
            adj = doc["adjacency"] if isinstance(doc, dict) else doc
            return independent_set(adj, name=f"independent-set:{Path(arg).name}")
        if kind == "file":
            return Topology.from_json(json.loads(Path(arg).read_text()))
    except ValueError as exc:
        raise DomainError(f"bad topology spec {spec!r}: {exc}") from exc
    raise DomainError(f"unknown topology kind {kind!r} in {spec!r}")
