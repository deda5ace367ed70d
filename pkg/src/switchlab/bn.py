"""Event-driven simulation of the bandwidth-sharing network under SFA rates.

Every packet carries one unit of work.  Route i serves its m_i packets in
processor sharing at total rate phi_i(m), so each packet depletes at
phi_i / m_i.  Rather than touching every residual, each route keeps a virtual
clock V_i advancing at phi_i / m_i and stores each packet's departure target
(V_i at arrival plus one); the residual of a packet is ``target - V_i``.
"""

from __future__ import annotations

import csv
from collections import deque
from typing import Callable, TextIO

import numpy as np

from .core import ResourcePolytope
from .errors import ConsistencyError, DomainError, OrderingError
from .sfa import SfaRates

EPS = 1e-12


class BnState:
    """Bandwidth-sharing network state; single-threaded."""

    def __init__(
        self,
        polytope: ResourcePolytope,
        rates: Callable[[tuple], tuple] | None = None,
        trace: TextIO | None = None,
    ):
        self.polytope = polytope
        self.n = polytope.n_routes
        self.rate_fn = rates or SfaRates(polytope)
        self.clock = 0.0
        self.m = [0] * self.n
        self._targets = [deque() for _ in range(self.n)]
        self._vclock = [0.0] * self.n
        self._target_sum = [0.0] * self.n
        self._cum = [0.0] * self.n  # S^SFA by Neumaier summation: _cum + _comp
        self._comp = [0.0] * self.n
        self.arrivals = [0] * self.n
        self.departures = [0] * self.n
        self._phi = (0.0,) * self.n
        # time-weighted statistics, enabled by ``track_occupancy``
        self.occupancy_time: dict[int, float] | None = None
        self.workload_integral = 0.0
        self._writer = csv.writer(trace, lineterminator="\n") if trace is not None else None
        if self._writer is not None:
            self._writer.writerow(["time", "event", "route", "m"])

    def track_occupancy(self) -> None:
        self.occupancy_time = {}
        self.workload_integral = 0.0

    # ------------------------------------------------------------------ queries
    @property
    def counts(self) -> np.ndarray:
        return np.array(self.m, dtype=np.int64)

    @property
    def cumulative(self) -> list[float]:
        """S^SFA per route: total service delivered so far."""
        return [s + c for s, c in zip(self._cum, self._comp)]

    @property
    def rates(self) -> np.ndarray:
        return np.array(self._phi)

    def workload(self) -> np.ndarray:
        """W_i: total residual work on each route."""
        return np.array([self._target_sum[i] - self.m[i] * self._vclock[i] for i in range(self.n)])

    def residuals(self, route: int) -> list[float]:
        v = self._vclock[route]
        return [t - v for t in self._targets[route]]

    def slot_allocation(self, slot: int) -> np.ndarray:
        """S^SFA at the integer time ``slot``; the state must sit exactly there."""
        if self.clock != float(slot):
            raise OrderingError(f"state is at t={self.clock}, not at slot boundary {slot}")
        return np.array(self.cumulative)

    # ------------------------------------------------------------------ dynamics
    def _log(self, event: str, route: int) -> None:
        if self._writer is not None:
            self._writer.writerow([repr(self.clock), event, route, " ".join(map(str, self.m))])

    def _refresh(self) -> None:
        phi = self.rate_fn(tuple(self.m))
        for i in range(self.n):
            if self.m[i] > 0 and not phi[i] > 0.0:
                raise ConsistencyError(f"route {i} holds {self.m[i]} packets but has rate {phi[i]}")
        self._phi = phi

    def _elapse(self, dt: float) -> None:
        if dt <= 0.0:
            return
        phi = self._phi
        if self.occupancy_time is not None:
            total = sum(self.m)
            self.occupancy_time[total] = self.occupancy_time.get(total, 0.0) + dt
            w = sum(self._target_sum[i] - self.m[i] * self._vclock[i] for i in range(self.n))
            self.workload_integral += w * dt - 0.5 * sum(phi) * dt * dt
        for i in range(self.n):
            if self.m[i]:
                self._vclock[i] += phi[i] / self.m[i] * dt
                x = phi[i] * dt
                s = self._cum[i]
                t = s + x
                if abs(s) >= abs(x):
                    self._comp[i] += (s - t) + x
                else:
                    self._comp[i] += (x - t) + s
                self._cum[i] = t
        self.clock += dt

    def _next_departure(self) -> tuple[float, int]:
        best, route = np.inf, -1
        for i in range(self.n):
            if self.m[i]:
                dt = (self._targets[i][0] - self._vclock[i]) * self.m[i] / self._phi[i]
                if dt < best:
                    best, route = dt, i
        return best, route

    def _depart_due(self) -> bool:
        """Remove every packet whose residual has fallen below EPS."""
        gone = False
        for i in range(self.n):
            q = self._targets[i]
            while q and q[0] - self._vclock[i] < EPS:
                self._target_sum[i] -= q.popleft()
                self.m[i] -= 1
                self.departures[i] += 1
                gone = True
                if not q:  # restart the virtual clock to keep magnitudes small
                    self._vclock[i] = 0.0
                    self._target_sum[i] = 0.0
                self._log("departure", i)
        return gone

    def _run(self, t_end: float, inclusive: bool) -> None:
        while True:
            dt, route = self._next_departure()
            t_dep = self.clock + dt
            if t_dep < t_end or (inclusive and t_dep <= t_end):
                self._elapse(dt)
                self._vclock[route] = self._targets[route][0]  # absorb rounding in the closed-form time
                self._depart_due()
                self._refresh()
            else:
                self._elapse(t_end - self.clock)
                self.clock = t_end
                # an arrival at t_end is processed before departures due at t_end
                if inclusive and self._depart_due():
                    self._refresh()
                return

    def advance_to(self, t_end: float) -> None:
        """Run departures up to and including ``t_end`` with no arrivals in between."""
        if t_end < self.clock:
            raise OrderingError(f"cannot advance from t={self.clock} back to {t_end}")
        self._run(float(t_end), inclusive=True)

    def inject_arrival(self, route: int, time: float) -> None:
        """Add one unit packet on ``route`` at ``time``; departures at the same instant come after."""
        if not 0 <= route < self.n:
            raise DomainError(f"route {route} out of range")
        if time < self.clock:
            raise OrderingError(f"arrival at t={time} precedes the clock t={self.clock}")
        self._run(float(time), inclusive=False)
        target = self._vclock[route] + 1.0
        self._targets[route].append(target)
        self._target_sum[route] += target
        self.m[route] += 1
        self.arrivals[route] += 1
        self._log("arrival", route)
        self._refresh()

    def check_conservation(self, tol: float = 1e-6) -> None:
        """W_i = arrivals_i - S^SFA_i, since a route with work is never starved."""
        w = self.workload()
        gap = np.abs(w - (np.array(self.arrivals) - np.array(self.cumulative)))
        if gap.max(initial=0.0) > tol:
            raise ConsistencyError(f"workload and cumulative service disagree by {gap.max()}")


def simulate_bn(
    polytope: ResourcePolytope,
    arrival_rates,
    horizon: float,
    rng: np.random.Generator,
    warmup: float = 0.0,
) -> dict:
    """Run BN alone with Poisson arrivals; return time-averaged occupancy statistics.

    The occupancy histogram and mean workload cover ``(warmup, horizon]``.
    """
    lam = np.asarray(arrival_rates, dtype=float)
    if lam.shape != (polytope.n_routes,) or np.any(lam < 0):
        raise DomainError("arrival rates must be a nonnegative vector over routes")
    total = lam.sum()
    if total <= 0:
        raise DomainError("at least one route needs positive arrival rate")
    state = BnState(polytope)
    probs = lam / total
    t = 0.0
    tracking = False
    chunk = 4096
    while True:
        gaps = rng.exponential(1.0 / total, chunk)
        routes = rng.choice(polytope.n_routes, size=chunk, p=probs)
        for gap, route in zip(gaps.tolist(), routes.tolist()):
            t += gap
            if not tracking and t > warmup:
                state.advance_to(warmup)
                state.track_occupancy()
                tracking = True
            if t > horizon:
                state.advance_to(horizon)
                span = horizon - warmup
                hist = state.occupancy_time or {}
                top = max(hist, default=0)
                pmf = np.zeros(top + 1)
                for k, v in hist.items():
                    pmf[k] = v / span
                return {
                    "total_count_pmf": pmf,
                    "mean_workload": state.workload_integral / span,
                    "arrivals": np.array(state.arrivals),
                    "state": state,
                }
            state.inject_arrival(route, t)
