"""Schedule sets, resource polytopes, loads and decomposition kernels.

A schedule is a tuple of 0/1 ints.  A :class:`ScheduleSet` is an explicitly
enumerated, monotone (closed under taking sub-schedules) finite set of
schedules.  A :class:`ResourcePolytope` is the ``R x <= C`` description of the
convex hull of a schedule set.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, ReductionError
from .lp import simplex

TOL = 1e-9

Schedule = tuple[int, ...]


def as_schedule(entries: Iterable[int], n: int | None = None) -> Schedule:
    sigma = tuple(int(x) for x in entries)
    if any(x not in (0, 1) for x in sigma):
        raise DomainError(f"schedule entries must be 0 or 1, got {sigma}")
    if n is not None and len(sigma) != n:
        raise DimensionError(f"schedule {sigma} has length {len(sigma)}, expected {n}")
    return sigma


def _vector(values, n: int | None = None, name: str = "vector") -> np.ndarray:
    arr = np.asarray(values, dtype=float).ravel()
    if n is not None and arr.shape != (n,):
        raise DimensionError(f"{name} has length {arr.size}, expected {n}")
    if np.any(np.isnan(arr)):
        raise DomainError(f"{name} contains NaN")
    return arr


def _nonneg(values, n: int | None, name: str) -> np.ndarray:
    arr = _vector(values, n, name)
    if np.any(arr < 0):
        raise DomainError(f"{name} must be componentwise nonnegative, got {arr.tolist()}")
    return arr


@dataclass(frozen=True)
class ScheduleSet:
    """A finite monotone set of binary schedules over ``n_queues`` queues."""

    schedules: tuple[Schedule, ...]
    n_queues: int
    matrix: np.ndarray = field(init=False, repr=False, compare=False)
    maximal: tuple[Schedule, ...] = field(init=False, repr=False, compare=False)
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = int(self.n_queues)
        scheds = sorted({as_schedule(s, n) for s in self.schedules})
        members = set(scheds)
        zero = (0,) * n
        if zero not in members:
            raise ContractError("schedule set must contain the zero schedule")
        for i in range(n):
            unit = tuple(int(k == i) for k in range(n))
            if unit not in members:
                raise ContractError(f"schedule set is missing unit vector e_{i}")
        for s in scheds:
            for i, bit in enumerate(s):
                if bit and s[:i] + (0,) + s[i + 1:] not in members:
                    raise ContractError(f"schedule set is not monotone: sub-schedules of {s} missing")
        mat = np.array(scheds, dtype=float).reshape(len(scheds), n)
        mat.setflags(write=False)
        maximal = []
        for s in scheds:
            if not any(s):
                continue
            up = any(s[i] == 0 and s[:i] + (1,) + s[i + 1:] in members for i in range(n))
            if not up:
                maximal.append(s)
        object.__setattr__(self, "schedules", tuple(scheds))
        object.__setattr__(self, "n_queues", n)
        object.__setattr__(self, "matrix", mat)
        object.__setattr__(self, "maximal", tuple(maximal))
        object.__setattr__(self, "_index", {s: k for k, s in enumerate(scheds)})

    @property
    def k_max(self) -> int:
        return max(sum(s) for s in self.schedules)

    @property
    def zero(self) -> Schedule:
        return (0,) * self.n_queues

    def __len__(self) -> int:
        return len(self.schedules)

    def __iter__(self):
        return iter(self.schedules)

    def __contains__(self, sigma) -> bool:
        return tuple(sigma) in self._index

    def index(self, sigma) -> int:
        return self._index[tuple(sigma)]


def monotone_close(schedules: Iterable[Sequence[int]], n: int | None = None) -> ScheduleSet:
    """Smallest monotone superset of ``schedules``, always including 0 and every e_i."""
    scheds = [as_schedule(s) for s in schedules]
    lengths = {len(s) for s in scheds}
    if n is not None:
        lengths.add(int(n))
    if len(lengths) > 1:
        raise DimensionError(f"inconsistent schedule lengths {sorted(lengths)}")
    if not lengths:
        raise DimensionError("cannot infer the number of queues from an empty schedule list")
    n = lengths.pop()
    closed = {(0,) * n}
    closed.update(tuple(int(k == i) for k in range(n)) for i in range(n))
    for s in scheds:
        support = [i for i, bit in enumerate(s) if bit]
        for r in range(len(support) + 1):
            for subset in itertools.combinations(support, r):
                sub = [0] * n
                for i in subset:
                    sub[i] = 1
                closed.add(tuple(sub))
    return ScheduleSet(tuple(closed), n)


@dataclass(frozen=True)
class ResourcePolytope:
    """``{x in [0,1]^N : R x <= C}`` with ``R`` of shape (J, N)."""

    r_matrix: np.ndarray
    capacities: np.ndarray

    def __post_init__(self):
        R = np.array(self.r_matrix, dtype=float, ndmin=2)
        C = np.array(self.capacities, dtype=float).ravel()
        if R.shape[0] != C.size:
            raise DimensionError(f"R has {R.shape[0]} rows but C has {C.size} entries")
        if np.any(R < 0):
            raise DomainError("resource consumption R must be nonnegative")
        if np.any(C <= 0):
            raise DomainError("capacities C must be strictly positive")
        if np.any(R.max(axis=0) <= 0):
            raise DomainError("every route must consume some resource")
        R.setflags(write=False)
        C.setflags(write=False)
        object.__setattr__(self, "r_matrix", R)
        object.__setattr__(self, "capacities", C)

    @property
    def rank(self) -> int:
        return self.r_matrix.shape[0]

    @property
    def n_routes(self) -> int:
        return self.r_matrix.shape[1]

    def resource_loads(self, rates) -> np.ndarray:
        lam = _nonneg(rates, self.n_routes, "rates")
        return self.r_matrix @ lam / self.capacities

    def contains(self, x, tol: float = TOL) -> bool:
        x = _vector(x, self.n_routes)
        return bool(np.all(self.r_matrix @ x <= self.capacities + tol))

    def admits(self, sset: ScheduleSet, tol: float = TOL) -> bool:
        """True when every schedule of ``sset`` satisfies R sigma <= C."""
        if sset.n_queues != self.n_routes:
            raise DimensionError("schedule set and polytope disagree on N")
        return bool(np.all(sset.matrix @ self.r_matrix.T <= self.capacities + tol))


@dataclass(frozen=True)
class Decomposition:
    """Nonnegative combination ``sum_k alpha_k * sigma_k`` of schedules."""

    atoms: tuple[tuple[Schedule, float], ...]
    n: int

    @classmethod
    def from_mapping(cls, coefs: dict, n: int) -> "Decomposition":
        atoms = tuple(sorted((tuple(s), float(a)) for s, a in coefs.items() if a > 0))
        return cls(atoms, n)

    @property
    def total(self) -> float:
        return float(sum(a for _, a in self.atoms))

    @property
    def support(self) -> int:
        return len(self.atoms)

    def vector(self) -> np.ndarray:
        out = np.zeros(self.n)
        for s, a in self.atoms:
            out += a * np.asarray(s, dtype=float)
        return out

    def as_dict(self) -> dict:
        return dict(self.atoms)

    def largest_atom(self) -> tuple[Schedule, float] | None:
        if not self.atoms:
            return None
        return min(self.atoms, key=lambda sa: (-sa[1], sa[0]))


def load(rates, polytope: ResourcePolytope) -> float:
    """rho(lambda) = max_j (R lambda)_j / C_j."""
    loads = polytope.resource_loads(rates)
    return float(loads.max()) if loads.size else 0.0


def solve_primal(target, sset: ScheduleSet) -> Decomposition:
    """Basic optimal solution of ``min sum(alpha) s.t. sum alpha_s s >= target``.

    Only maximal schedules enter the LP; any optimum over the full set can be
    lifted onto them without changing the objective.
    """
    n = sset.n_queues
    d = _nonneg(target, n, "target")
    if not np.any(d > 0):
        return Decomposition((), n)
    cols = np.array(sset.maximal, dtype=float).reshape(-1, n).T
    k = cols.shape[1]
    A = np.hstack([cols, -np.eye(n)])
    c = np.concatenate([np.ones(k), np.zeros(n)])
    res = simplex(c, A, d)
    alpha = res.x[:k]
    atoms = tuple((sset.maximal[j], float(alpha[j])) for j in range(k) if alpha[j] > 0)
    return Decomposition(atoms, n)


def tighten(dec: Decomposition, target, tol: float = TOL) -> Decomposition:
    """Shift mass onto sub-schedules until ``sum alpha_s s == target`` exactly.

    Each step picks the first over-covered coordinate i, the heaviest atom
    sigma with sigma_i = 1, and moves ``min(alpha, gap_i)`` of its mass to
    ``sigma - e_i``.  Total mass is unchanged.
    """
    n = dec.n
    d = _nonneg(target, n, "target")
    alpha = dict(dec.atoms)
    covered = dec.vector()
    if np.any(covered < d - tol):
        raise ContractError(
            f"decomposition does not cover target: sum={covered.tolist()} target={d.tolist()}"
        )
    gap = covered - d
    for i in range(n):
        while gap[i] > tol:
            options = [(s, a) for s, a in alpha.items() if s[i] == 1 and a > 0]
            if not options:
                raise ContractError(f"no atom covers coordinate {i} despite positive gap")
            s, a = min(options, key=lambda sa: (-sa[1], sa[0]))
            eps = min(a, gap[i])
            if a - eps <= tol * 1e-3:
                del alpha[s]
                eps = a
            else:
                alpha[s] = a - eps
            sub = s[:i] + (0,) + s[i + 1:]
            alpha[sub] = alpha.get(sub, 0.0) + eps
            gap[i] -= eps
    out = Decomposition.from_mapping(alpha, n)
    err = np.abs(out.vector() - d).max() if n else 0.0
    if err > tol:
        raise ContractError(f"tightening left residual {err:.3g}")
    return out


def caratheodory_reduce(dec: Decomposition, tol: float = TOL) -> Decomposition:
    """Reduce support to at most N+1 atoms preserving sum(alpha*s) and sum(alpha)."""
    n = dec.n
    scheds = [s for s, _ in dec.atoms]
    alpha = np.array([a for _, a in dec.atoms], dtype=float)
    while len(scheds) > n + 1:
        M = np.vstack([np.array(scheds, dtype=float).T, np.ones(len(scheds))])
        _, _, vt = np.linalg.svd(M)
        v = vt[-1]
        if np.abs(M @ v).max() > 1e-10 * max(1.0, np.abs(v).max()):
            raise ReductionError("no numerically exact null-space direction found")
        if v.max() <= 0:
            v = -v
        pos = v > 1e-14
        if not pos.any():
            raise ReductionError("null-space direction has no positive entry")
        ratios = np.full_like(alpha, np.inf)
        ratios[pos] = alpha[pos] / v[pos]
        k = int(np.argmin(ratios))
        alpha = alpha - ratios[k] * v
        if alpha.min() < -1e-12:
            raise ReductionError(f"reduction step produced negative coefficient {alpha.min():.3g}")
        alpha[k] = 0.0
        keep = alpha > 1e-15
        scheds = [s for s, kp in zip(scheds, keep) if kp]
        alpha = np.clip(alpha[keep], 0.0, None)
    out = Decomposition(tuple(zip(scheds, alpha.tolist())), n)
    if np.abs(out.vector() - dec.vector()).max(initial=0.0) > tol or abs(out.total - dec.total) > tol:
        raise ReductionError("support reduction drifted beyond tolerance")
    return Decomposition.from_mapping(out.as_dict(), n)


def max_subschedule(bound, sset: ScheduleSet, tol: float = TOL) -> Schedule:
    """Largest schedule (by sum) lying below ``bound``; lexicographically smallest on ties."""
    b = _nonneg(bound, sset.n_queues, "bound")
    feasible = np.all(sset.matrix <= b + tol, axis=1)
    sizes = np.where(feasible, sset.matrix.sum(axis=1), -1.0)
    # schedules are stored in lexicographic order, so argmax picks the smallest tie
    return sset.schedules[int(np.argmax(sizes))]


def equality_decomposition(target, sset: ScheduleSet) -> Decomposition:
    """solve_primal -> tighten -> caratheodory_reduce."""
    return caratheodory_reduce(tighten(solve_primal(target, sset), target))


def to_json(sset: ScheduleSet, polytope: ResourcePolytope | None = None) -> dict:
    doc = {"n": sset.n_queues, "schedules": [list(s) for s in sset.schedules]}
    if polytope is not None:
        doc["R"] = polytope.r_matrix.tolist()
        doc["C"] = polytope.capacities.tolist()
    return doc


def from_json(doc: dict) -> tuple[ScheduleSet, ResourcePolytope | None]:
    n = int(doc["n"])
    sset = ScheduleSet(tuple(tuple(s) for s in doc["schedules"]), n)
    polytope = None
    if "R" in doc and "C" in doc:
        polytope = ResourcePolytope(np.array(doc["R"], dtype=float).reshape(-1, n), doc["C"])
    return sset, polytope
