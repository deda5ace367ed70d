"""Discrete-time switched network driven by the emulation policy or MW-alpha.

The emulation policy tracks D(tau) = S^SFA(tau) - B(tau), the service the
bandwidth-sharing network has delivered but the switched network has not yet
matched, and each slot serves a schedule drawn from a decomposition of D.
Both networks see the same arrivals.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from .bn import BnState
from .core import TOL, ScheduleSet, as_schedule
from .engine import DecompositionEngine, _raise
from .errors import ConsistencyError, ContractError, DomainError, InvariantViolation
from .topologies import Topology

INV_TOL = 1e-6
AUDIT_EVERY = 10_000
POLICIES = ("emul", "mw")

INVARIANTS = (
    "dominance_lower",  # W <= Q
    "dominance_upper",  # Q <= W + D
    "rho_d_ceiling",  # rho(D) <= N + 2
    "sum_d_ceiling",  # sum D <= K (N + 2)
    "rho_d_growth",  # rho(D') <= rho(D) + 1
    "service_within_d",  # sigma <= D
    "d_nonnegative",
    "idle_zero",  # Z == 0 under the emulation policy
    "conservation",  # Q == A - B + Z
    "slot_load",  # load(Delta S^SFA) <= 1
    "d_drift",  # incremental D agrees with S^SFA - B
)
# These rest on conv(S) == {x : R x <= C}; on other topologies they are only counted.
LOAD_INVARIANTS = frozenset({"rho_d_ceiling", "sum_d_ceiling", "rho_d_growth", "slot_load"})


@dataclass
class SnState:
    """Switched-network state; integer counters are exact, D is a float vector."""

    n: int
    n_schedules: int
    slot: int = 0
    q: np.ndarray = None
    cum_arrivals: np.ndarray = None
    cum_service: np.ndarray = None
    cum_idle: np.ndarray = None
    tracking: np.ndarray = None
    usage: np.ndarray = None

    def __post_init__(self):
        zeros = lambda: np.zeros(self.n, dtype=np.int64)  # noqa: E731
        self.q = zeros() if self.q is None else np.asarray(self.q, dtype=np.int64).copy()
        self.cum_arrivals = zeros() if self.cum_arrivals is None else np.asarray(self.cum_arrivals, dtype=np.int64)
        self.cum_service = zeros() if self.cum_service is None else np.asarray(self.cum_service, dtype=np.int64)
        self.cum_idle = zeros() if self.cum_idle is None else np.asarray(self.cum_idle, dtype=np.int64)
        self.tracking = np.zeros(self.n) if self.tracking is None else np.asarray(self.tracking, dtype=float)
        self.usage = np.zeros(self.n_schedules, dtype=np.int64) if self.usage is None else self.usage

    @classmethod
    def empty(cls, sset: ScheduleSet) -> "SnState":
        return cls(sset.n_queues, len(sset))


def choose_schedule(state: SnState, sset: ScheduleSet, engine: DecompositionEngine | None = None):
    """The emulation policy's schedule for the current tracking vector D."""
    engine = engine or DecompositionEngine(sset)
    index, _ = engine.choose(state.tracking)
    return sset.schedules[index]


def mw_schedule(q, sset: ScheduleSet, alpha: float = 1.0):
    """Maximum of sum_i sigma_i q_i**alpha; the lexicographically smallest maximiser wins ties."""
    if not alpha > 0:
        raise DomainError(f"MW exponent must be positive, got {alpha}")
    weights = np.asarray(q, dtype=float) ** alpha
    return sset.schedules[int(np.argmax(sset.matrix @ weights))]


def apply_slot(state: SnState, sigma, arrivals, sset: ScheduleSet, delta_s=None) -> SnState:
    """Serve ``sigma``, admit ``arrivals`` and move D by ``delta_s - sigma``; updates in place."""
    sigma = as_schedule(sigma, state.n)
    if sigma not in sset:
        raise ContractError(f"schedule {sigma} is not in the schedule set")
    dA = np.asarray(arrivals, dtype=np.int64)
    if dA.shape != (state.n,) or np.any(dA < 0):
        raise DomainError("arrivals must be a nonnegative integer vector over queues")
    s = np.array(sigma, dtype=np.int64)
    served = np.minimum(state.q, s)
    state.cum_idle += s - served
    state.q = state.q - served + dA
    state.cum_arrivals += dA
    state.cum_service += s
    state.usage[sset.index(sigma)] += 1
    if delta_s is not None:
        state.tracking = state.tracking - s + np.asarray(delta_s, dtype=float)
    state.slot += 1
    return state


@dataclass(frozen=True)
class CoupledConfig:
    topology: Topology
    rates: np.ndarray
    horizon: int
    policy: str = "emul"
    mw_alpha: float = 1.0
    warmup_fraction: float = 0.2
    seed: int | np.random.SeedSequence = 0
    strict: bool = True
    batches: int = 32
    couple_bn: bool | None = None  # default: only for the emulation policy
    trace: TextIO | None = None
    event_trace: TextIO | None = None

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise DomainError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.horizon <= 0:
            raise DomainError("horizon must be positive")
        if not 0 <= self.warmup_fraction < 1:
            raise DomainError("warmup fraction must lie in [0, 1)")
        if int(self.horizon * (1 - self.warmup_fraction)) < 1:
            raise DomainError("horizon leaves no slots after warmup")
        if not self.mw_alpha > 0:
            raise DomainError("mw_alpha must be positive")


@dataclass
class TraceSummary:
    """Per-run statistics over post-warmup slots; merge() pools replications."""

    policy: str
    slots: int
    sum_q: float
    sum_w: float
    batch_means: list
    q_hist: np.ndarray
    usage: np.ndarray
    max_rho_d: float
    max_sum_d: float
    violations: dict
    returns_to_empty: int
    replication_means: list = field(default_factory=list)

    @property
    def mean_q(self) -> float:
        return self.sum_q / self.slots

    @property
    def mean_w(self) -> float:
        return self.sum_w / self.slots

    @property
    def stderr(self) -> float:
        """Across replication means when there are several, else batch means."""
        means = self.replication_means if len(self.replication_means) > 1 else self.batch_means
        if len(means) < 2:
            return math.nan
        return float(np.std(means, ddof=1) / math.sqrt(len(means)))

    @property
    def total_violations(self) -> int:
        return int(sum(self.violations.values()))

    def ccdf(self) -> tuple[np.ndarray, np.ndarray]:
        """Levels l and empirical P(sum Q >= l)."""
        counts = self.q_hist.astype(float)
        tail = np.cumsum(counts[::-1])[::-1]
        return np.arange(counts.size), tail / counts.sum()

    def merge(self, other: "TraceSummary") -> "TraceSummary":
        if other.policy != self.policy:
            raise DomainError("cannot merge summaries of different policies")
        size = max(self.q_hist.size, other.q_hist.size)
        hist = np.zeros(size, dtype=np.int64)
        hist[: self.q_hist.size] += self.q_hist
        hist[: other.q_hist.size] += other.q_hist
        reps = (self.replication_means or [self.mean_q]) + (other.replication_means or [other.mean_q])
        return TraceSummary(
            policy=self.policy,
            slots=self.slots + other.slots,
            sum_q=self.sum_q + other.sum_q,
            sum_w=self.sum_w + other.sum_w,
            batch_means=self.batch_means + other.batch_means,
            q_hist=hist,
            usage=self.usage + other.usage,
            max_rho_d=max(self.max_rho_d, other.max_rho_d),
            max_sum_d=max(self.max_sum_d, other.max_sum_d),
            violations={k: self.violations.get(k, 0) + other.violations.get(k, 0) for k in INVARIANTS},
            returns_to_empty=self.returns_to_empty + other.returns_to_empty,
            replication_means=reps,
        )

    def to_json(self) -> dict:
        levels, tail = self.ccdf()
        return {
            "policy": self.policy,
            "slots": self.slots,
            "mean_sum_q": self.mean_q,
            "mean_sum_w": self.mean_w,
            "stderr_sum_q": self.stderr,
            "replication_means": list(self.replication_means),
            "max_rho_d": self.max_rho_d,
            "max_sum_d": self.max_sum_d,
            "violations": dict(self.violations),
            "returns_to_empty": self.returns_to_empty,
            "schedule_usage": self.usage.tolist(),
            "ccdf_sum_q": [[int(l), float(p)] for l, p in zip(levels, tail)],
        }


class _ArrivalStream:
    """Per-slot Poisson counts and uniform arrival instants, drawn ``chunk`` slots at a time.

    Within a slot arrivals are ordered by time, then route index.
    """

    def __init__(self, rates: np.ndarray, rng: np.random.Generator, chunk: int = 4096):
        self.rates = rates
        self.rng = rng
        self.chunk = chunk
        self._pos = 0
        self._len = 0

    def _refill(self) -> None:
        n = self.rates.size
        counts = self.rng.poisson(self.rates, size=(self.chunk, n))
        total = int(counts.sum())
        offsets = 1.0 - self.rng.random(total)  # uniform on (0, 1]
        slot_of = np.repeat(np.repeat(np.arange(self.chunk), n), counts.ravel())
        route_of = np.repeat(np.tile(np.arange(n), self.chunk), counts.ravel())
        order = np.lexsort((route_of, offsets, slot_of))
        self._counts = counts.astype(np.int64)
        self._offsets = offsets[order]
        self._routes = route_of[order].astype(np.int64)
        self._starts = np.searchsorted(slot_of[order], np.arange(self.chunk + 1)).astype(np.int64)
        self._pos = 0
        self._len = self.chunk

    def next_slot(self):
        if self._pos >= self._len:
            self._refill()
        k = self._pos
        self._pos += 1
        a, b = self._starts[k], self._starts[k + 1]
        return self._counts[k], self._offsets[a:b].tolist(), self._routes[a:b].tolist()

    def next_block(self, limit: int):
        """Up to ``limit`` slots: counts, offsets, routes and per-slot start indices into them."""
        if self._pos >= self._len:
            self._refill()
        k0 = self._pos
        k1 = min(self._len, k0 + limit)
        self._pos = k1
        base = self._starts[k0]
        stop = self._starts[k1]
        return (
            self._counts[k0:k1],
            self._offsets[base:stop],
            self._routes[base:stop],
            self._starts[k0: k1 + 1] - base,
        )


def _rho(vec: np.ndarray, topo: Topology, R: np.ndarray, C: np.ndarray) -> float:
    if topo.exact_polytope:
        return float(np.max(R @ vec / C)) if vec.size else 0.0
    return topo.load(np.maximum(vec, 0.0))


class _Stats:
    """Consumes per-slot (sum Q, sum W, rho(D), sum D) in chunks."""

    def __init__(self, config: CoupledConfig):
        self.policy = config.policy
        self.warmup = int(config.horizon * config.warmup_fraction)
        self.measured = config.horizon - self.warmup
        self.batch_len = max(1, self.measured // config.batches)
        self.batch_sums = np.zeros(self.measured // self.batch_len)
        self.hist = np.zeros(0, dtype=np.int64)
        self.sum_q = 0.0
        self.sum_w = 0.0
        self.max_rho_d = 0.0
        self.max_sum_d = 0.0
        self.returns = 0
        self.prev_total = 0
        self.writer = csv.writer(config.trace, lineterminator="\n") if config.trace is not None else None
        if self.writer is not None:
            self.writer.writerow(["slot", "sumQ", "sumW", "rhoD", "policy"])

    def consume(self, slot0: int, sum_q, sum_w, rho_d, sum_d) -> None:
        """Slots slot0+1 .. slot0+len(sum_q) have just ended."""
        sum_q = np.asarray(sum_q, dtype=np.int64)
        if sum_q.size == 0:
            return
        sum_w = np.asarray(sum_w, dtype=float)
        rho_d = np.asarray(rho_d, dtype=float)
        if self.writer is not None:
            for k in range(sum_q.size):
                self.writer.writerow([slot0 + k + 1, int(sum_q[k]), repr(float(sum_w[k])), repr(float(rho_d[k])), self.policy])
        prev = np.concatenate(([self.prev_total], sum_q[:-1]))
        self.returns += int(np.count_nonzero((sum_q == 0) & (prev > 0)))
        self.prev_total = int(sum_q[-1])
        self.max_rho_d = max(self.max_rho_d, float(np.max(rho_d)))
        self.max_sum_d = max(self.max_sum_d, float(np.max(sum_d)))
        # slot index tau of each entry is slot0 + k; statistics start at tau == warmup
        first = max(0, self.warmup - slot0)
        if first >= sum_q.size:
            return
        q = sum_q[first:]
        pos = slot0 + first - self.warmup + np.arange(q.size)
        counts = np.bincount(q)
        if counts.size > self.hist.size:
            self.hist = np.concatenate([self.hist, np.zeros(counts.size - self.hist.size, dtype=np.int64)])
        self.hist[: counts.size] += counts
        self.sum_q += float(q.sum())
        self.sum_w += float(sum_w[first:].sum())
        batch = pos // self.batch_len
        keep = batch < self.batch_sums.size
        np.add.at(self.batch_sums, batch[keep], q[keep])

    def summary(self, usage: np.ndarray, violations: dict) -> TraceSummary:
        last = int(np.flatnonzero(self.hist).max(initial=0))
        return TraceSummary(
            policy=self.policy,
            slots=self.measured,
            sum_q=self.sum_q,
            sum_w=self.sum_w,
            batch_means=(self.batch_sums / self.batch_len).tolist(),
            q_hist=self.hist[: last + 1].copy() if self.hist.size else np.zeros(1, dtype=np.int64),
            usage=usage.copy(),
            max_rho_d=self.max_rho_d,
            max_sum_d=self.max_sum_d,
            violations=violations,
            returns_to_empty=self.returns,
        )


def _uses_kernel(config: CoupledConfig, couple: bool) -> bool:
    from ._chain import ChainLayout

    if config.event_trace is not None or not config.topology.exact_polytope:
        return False
    return not couple or ChainLayout(config.topology.polytope).eligible


def run_coupled(config: CoupledConfig, use_kernel: bool | None = None) -> TraceSummary:
    """Simulate SN (and BN for the emulation policy) with shared arrivals.

    ``use_kernel`` picks the compiled loop (default: whenever the topology
    allows it) or the pure-Python reference loop; both follow the same
    trajectory.
    """
    topo = config.topology
    n = topo.n_queues
    lam = np.asarray(config.rates, dtype=float)
    if lam.shape != (n,) or np.any(lam < 0):
        raise DomainError("rates must be a nonnegative vector over queues")
    if topo.load(lam) >= 1:
        warnings.warn(f"load {topo.load(lam):.6g} >= 1: queues will grow without bound", RuntimeWarning, stacklevel=2)
    emul = config.policy == "emul"
    couple = emul if config.couple_bn is None else (config.couple_bn or emul)
    seq = config.seed if isinstance(config.seed, np.random.SeedSequence) else np.random.SeedSequence(config.seed)
    stream = _ArrivalStream(lam, np.random.default_rng(seq))
    stats = _Stats(config)
    if use_kernel is None:
        use_kernel = _uses_kernel(config, couple)
    runner = _run_kernel if use_kernel else _run_reference
    usage, violations = runner(config, couple, stream, stats)
    return stats.summary(usage, violations)


def _violation(config, name, detail, state, m, w):
    return InvariantViolation(
        f"slot {state.slot}: {name} violated ({detail})",
        {
            "slot": state.slot,
            "invariant": name,
            "detail": detail,
            "q": state.q.tolist(),
            "d": state.tracking.tolist(),
            "a": state.cum_arrivals.tolist(),
            "b": state.cum_service.tolist(),
            "z": state.cum_idle.tolist(),
            "m": list(m) if m is not None else None,
            "w": list(w) if w is not None else None,
        },
    )


def _run_reference(config: CoupledConfig, couple: bool, stream: _ArrivalStream, stats: _Stats):
    topo = config.topology
    sset = topo.schedule_set
    n = topo.n_queues
    emul = config.policy == "emul"
    engine = DecompositionEngine(sset) if emul else None
    bn = BnState(topo.polytope, trace=config.event_trace) if couple else None
    R, C = topo.polytope.r_matrix, topo.polytope.capacities
    mat = sset.matrix.astype(np.int64)
    rho_cap = n + 2 + INV_TOL
    sum_cap = sset.k_max * (n + 2) + INV_TOL
    state = SnState.empty(sset)
    s_prev = np.zeros(n)
    rho_d = 0.0
    violations = dict.fromkeys(INVARIANTS, 0)
    buf: list[tuple] = []
    chunk_start = 0

    def flag(name: str, detail: str) -> None:
        violations[name] += 1
        if config.strict and (topo.exact_polytope or name not in LOAD_INVARIANTS):
            raise _violation(config, name, detail, state, bn.m if bn else None,
                             bn.workload().tolist() if bn else None)

    for tau in range(config.horizon):
        d = state.tracking
        if emul:
            idx, _ = engine.choose(d)
        else:
            w = state.q.astype(float) ** config.mw_alpha
            idx = int(np.argmax(sset.matrix @ w))
        sigma = mat[idx]
        if emul and np.any(sigma > d + INV_TOL):
            flag("service_within_d", f"sigma={sigma.tolist()} d={d.tolist()}")
        dA, offsets, routes = stream.next_slot()

        if bn is not None:
            for off, route in zip(offsets, routes):
                bn.inject_arrival(route, tau + off)
            bn.advance_to(tau + 1)
            s_now = np.array(bn.cumulative)
            delta_s = s_now - s_prev
            s_prev = s_now

        served = np.minimum(state.q, sigma)
        state.cum_idle += sigma - served
        state.q = state.q - served + dA
        state.cum_arrivals += dA
        state.cum_service += sigma
        state.usage[idx] += 1
        state.slot += 1

        total_q = int(state.q.sum())
        total_w = 0.0
        sum_d = 0.0
        if emul:
            new_d = d - sigma + delta_s
            state.tracking = new_d
            new_rho = _rho(new_d, topo, R, C)
            sum_d = float(new_d.sum())
            w_vec = bn.workload()
            total_w = float(w_vec.sum())
            if np.any(w_vec > state.q + INV_TOL):
                flag("dominance_lower", f"w={w_vec.tolist()}")
            if np.any(state.q > w_vec + new_d + INV_TOL):
                flag("dominance_upper", f"w={w_vec.tolist()}")
            if new_rho > rho_cap:
                flag("rho_d_ceiling", f"rho(D)={new_rho}")
            if sum_d > sum_cap:
                flag("sum_d_ceiling", f"sum(D)={sum_d}")
            if new_rho > rho_d + 1 + INV_TOL:
                flag("rho_d_growth", f"{rho_d} -> {new_rho}")
            if new_d.min() < -INV_TOL:
                flag("d_nonnegative", f"min D={new_d.min()}")
            if state.cum_idle.any():
                flag("idle_zero", f"z={state.cum_idle.tolist()}")
            if _rho(delta_s, topo, R, C) > 1 + TOL:
                flag("slot_load", f"delta_s={delta_s.tolist()}")
            rho_d = new_rho
        elif bn is not None:
            total_w = float(bn.workload().sum())
        if state.slot % AUDIT_EVERY == 0:
            if np.any(state.q != state.cum_arrivals - state.cum_service + state.cum_idle):
                flag("conservation", "Q != A - B + Z")
            if emul:
                exact = s_prev - state.cum_service
                drift = float(np.abs(exact - state.tracking).max())
                state.tracking = exact  # resynchronise after the audit
                if drift > INV_TOL:
                    flag("d_drift", f"drift={drift}")
                bn.check_conservation()
        buf.append((total_q, total_w, rho_d, sum_d))
        if len(buf) == 4096:
            stats.consume(chunk_start, *zip(*buf))
            chunk_start += len(buf)
            buf = []
    if buf:
        stats.consume(chunk_start, *zip(*buf))
    if np.any(state.q != state.cum_arrivals - state.cum_service + state.cum_idle):
        flag("conservation", "Q != A - B + Z")
    return state.usage, violations


def _run_kernel(config: CoupledConfig, couple: bool, stream: _ArrivalStream, stats: _Stats):
    from . import _fastsim as fs
    from ._chain import ChainLayout, log_factorials, workspace

    topo = config.topology
    sset = topo.schedule_set
    n = topo.n_queues
    emul = config.policy == "emul"
    engine = DecompositionEngine(sset)
    layout = ChainLayout(topo.polytope) if couple else None
    if layout is not None:
        chain = layout.args()
        ws = workspace(layout)
    else:  # inert placeholders when BN is not simulated
        chain = (np.full(n, -1, dtype=np.int64), np.zeros((1, 5), dtype=np.int64), np.zeros((0, 3), dtype=np.int64),
                 np.zeros((1, n)), 0.0, np.zeros((1, 1, 1)))
        ws = np.zeros((6, 1))
    R = np.ascontiguousarray(topo.polytope.r_matrix)
    C = np.ascontiguousarray(topo.polytope.capacities)
    mat_int = sset.matrix.astype(np.int64)
    state = SnState.empty(sset)
    s_prev = np.zeros(n)
    fstate = np.zeros(2)
    cap = 256
    m = np.zeros(n, dtype=np.int64)
    head = np.zeros(n, dtype=np.int64)
    targets = np.zeros((n, cap))
    vclock = np.zeros(n)
    tsum = np.zeros(n)
    cum = np.zeros((2, n))  # S^SFA as sum + compensation
    phi = np.zeros(n)
    bn_arrivals = np.zeros(n, dtype=np.int64)
    lf = log_factorials(4096)
    viol = np.zeros(len(INVARIANTS), dtype=np.int64)
    slot = 0
    while slot < config.horizon:
        dA, offsets, routes, starts = stream.next_block(min(stream.chunk, config.horizon - slot))
        done_in_block = 0
        while done_in_block < dA.shape[0]:
            k0 = done_in_block
            size = dA.shape[0] - k0
            out_q = np.zeros(size, dtype=np.int64)
            out_w = np.zeros(size)
            out_rho = np.zeros(size)
            out_sumd = np.zeros(size)
            if int(m.sum()) + int(dA.sum()) + 2 >= lf.size:
                lf = log_factorials(2 * (lf.size + int(dA.sum())))
            status, done, detail = fs.coupled_chunk(
                slot, dA[k0:], offsets, routes, starts[k0:],
                emul, couple, config.strict, float(config.mw_alpha),
                engine.mat, mat_int, engine.maximal, engine.sub_index, engine.sizes, engine.zero_index,
                R, C, sset.k_max,
                state.q, state.cum_arrivals, state.cum_service, state.cum_idle, state.usage, state.tracking,
                s_prev, fstate,
                m, head, targets, vclock, tsum, cum, phi, bn_arrivals,
                *chain, lf, ws,
                viol, out_q, out_w, out_rho, out_sumd,
            )
            stats.consume(slot, out_q[:done], out_w[:done], out_rho[:done], out_sumd[:done])
            slot += done
            done_in_block += done
            state.slot = slot
            if status == fs.GROW:
                new_cap = 2 * cap
                grown = np.zeros((n, new_cap))
                for i in range(n):
                    grown[i, : m[i]] = targets[i, (head[i] + np.arange(m[i])) % cap]
                targets, cap = grown, new_cap
                head[:] = 0
            elif status == fs.VIOLATION:
                name = INVARIANTS[detail]
                raise _violation(config, name, "detected in compiled loop", state, m.tolist(),
                                 (tsum - m * vclock).tolist())
            elif status == fs.STARVED:
                raise ConsistencyError(f"slot {slot}: bandwidth-sharing network lost consistency (code {detail}, m={m.tolist()}, phi={phi.tolist()})")
            elif status == fs.DECOMPOSITION:
                _raise(detail, state.tracking)
    if np.any(state.q != state.cum_arrivals - state.cum_service + state.cum_idle):
        viol[INVARIANTS.index("conservation")] += 1
        if config.strict:
            raise _violation(config, "conservation", "Q != A - B + Z", state, m.tolist(), None)
    return state.usage, {name: int(viol[k]) for k, name in enumerate(INVARIANTS)}
