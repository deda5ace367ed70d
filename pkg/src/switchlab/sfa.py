"""Product-form quantities of the store-and-forward bandwidth-sharing network.

For routes i and resources j with x_ji = R_ji / C_j, the balance function is

    Phi(m) = sum over splits m~ of m across each route's resources of
             prod_j  multinomial(m~_j; m~_ji) * prod_i x_ji ** m~_ji

and the SFA rates are phi_i(m) = Phi(m - e_i) / Phi(m).
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from string import ascii_letters

import numpy as np
from scipy.special import gammaln

from ._chain import ChainLayout, chain_log_phi, chain_rates, log_factorials, workspace
from .core import ResourcePolytope, _nonneg, load
from .errors import CapacityError, DomainError, InstabilityError

BRUTE_FORCE_MAX_TOTAL = 12
BRUTE_FORCE_MAX_PAIRS = 12
MAX_TENSOR_SIZE = 20_000_000
ROOT_TOL = 1e-10


def _pairs(polytope: ResourcePolytope) -> list[list[int]]:
    """Resources used by each route (j with R_ji > 0)."""
    R = polytope.r_matrix
    return [list(np.flatnonzero(R[:, i] > 0)) for i in range(R.shape[1])]


def _occupancy(m, n: int) -> np.ndarray | None:
    arr = np.asarray(m)
    if arr.shape != (n,):
        raise DomainError(f"occupancy must have length {n}")
    if np.any(arr != np.round(arr)):
        raise DomainError("occupancy counts must be integers")
    arr = arr.astype(np.int64)
    return None if np.any(arr < 0) else arr


def _compositions(total: int, parts: int):
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def phi_bruteforce(m, polytope: ResourcePolytope, max_total: int = BRUTE_FORCE_MAX_TOTAL) -> float:
    """Phi(m) by enumerating every split of m across resources."""
    routes = _pairs(polytope)
    occ = _occupancy(m, polytope.n_routes)
    if occ is None:
        return 0.0
    if occ.sum() > max_total:
        raise CapacityError(f"phi_bruteforce enumerates at most total {max_total} packets, got {occ.sum()}")
    if sum(len(r) for r in routes) > BRUTE_FORCE_MAX_PAIRS:
        raise CapacityError(f"phi_bruteforce supports at most {BRUTE_FORCE_MAX_PAIRS} resource-route pairs")
    x = polytope.r_matrix / polytope.capacities[:, None]
    J = polytope.rank
    per_route = [list(_compositions(int(occ[i]), len(routes[i]))) for i in range(len(routes))]
    total = 0.0
    for split in itertools.product(*per_route):
        counts = [[] for _ in range(J)]
        weight = 1.0
        for i, parts in enumerate(split):
            for j, c in zip(routes[i], parts):
                counts[j].append(c)
                weight *= x[j, i] ** c
        for cs in counts:
            weight *= math.factorial(sum(cs))
            for c in cs:
                weight /= math.factorial(c)
        total += weight
    return total


class PhiEvaluator:
    """Evaluates log Phi(m) by contracting one small tensor per resource.

    Each route that uses two resources contributes one summation index (its
    split point); routes using more resources carry one index per resource
    plus a constraint tensor.  Every tensor is built in log space and rescaled
    by its maximum before exponentiation, so values far beyond the double range
    are handled through the returned logarithm.

    When no route uses more than two resources and no resource carries more
    than two split indices, a compiled matrix-chain kernel is used instead
    (``method == "chain"``); otherwise ``numpy.einsum`` contracts the tensors.
    """

    def __init__(self, polytope: ResourcePolytope, max_tensor_size: int = MAX_TENSOR_SIZE, method: str = "auto"):
        if method not in ("auto", "chain", "einsum"):
            raise DomainError(f"unknown Phi method {method!r}")
        self.polytope = polytope
        layout = ChainLayout(polytope)
        if method == "chain" and not layout.eligible:
            raise DomainError("chain method needs every route and resource to have degree <= 2")
        self.method = "chain" if layout.eligible and method != "einsum" else "einsum"
        self._layout = layout
        self._lf = log_factorials(256)
        self._ws = workspace(layout, 33) if layout.eligible else None
        self.routes = _pairs(polytope)
        x = polytope.r_matrix / polytope.capacities[:, None]
        with np.errstate(divide="ignore"):
            self.logx = np.log(x)
        self.max_tensor_size = max_tensor_size
        self._paths: dict[str, list] = {}

    def log_phi(self, m) -> float:
        occ = _occupancy(m, self.polytope.n_routes)
        if occ is None:
            return -math.inf
        return self._log_phi(occ)

    def _log_factorials(self, occ: np.ndarray) -> np.ndarray:
        need = int(occ.sum()) + 1
        if need >= self._lf.size:
            self._lf = log_factorials(max(need, 2 * self._lf.size))
        return self._lf

    def _log_phi(self, occ: np.ndarray) -> float:
        if self.method == "chain":
            L = self._layout
            return float(chain_log_phi(occ, *L.args(), self._log_factorials(occ)))
        return self._einsum_log_phi(occ)

    def _einsum_log_phi(self, occ: np.ndarray) -> float:
        J = self.polytope.rank
        # per resource: list of (axis label, count array) and fixed log weight
        axes: list[list[tuple[str, np.ndarray, int]]] = [[] for _ in range(J)]
        fixed_total = np.zeros(J, dtype=np.int64)
        fixed_log = np.zeros(J)
        extra_ops: list[tuple[str, np.ndarray]] = []
        letters = iter(ascii_letters)
        try:
            for i, m_i in enumerate(occ):
                if m_i == 0:
                    continue
                res = self.routes[i]
                if len(res) == 1:
                    j = res[0]
                    fixed_total[j] += m_i
                    fixed_log[j] += m_i * self.logx[j, i] - gammaln(m_i + 1)
                elif len(res) == 2:
                    label = next(letters)
                    up = np.arange(m_i + 1)
                    axes[res[0]].append((label, up, i))
                    axes[res[1]].append((label, up[::-1].copy(), i))
                else:
                    labels = "".join(next(letters) for _ in res)
                    for j, label in zip(res, labels):
                        axes[j].append((label, np.arange(m_i + 1), i))
                    grid = np.indices((m_i + 1,) * len(res)).sum(axis=0)
                    extra_ops.append((labels, (grid == m_i).astype(float)))
        except StopIteration:
            raise CapacityError("too many summation indices for tensor contraction") from None

        log_offset = 0.0
        operands = []
        subscripts = []
        for j in range(J):
            spec = axes[j]
            if not spec:
                if fixed_total[j]:
                    log_offset += gammaln(fixed_total[j] + 1) + fixed_log[j]
                continue
            shape = tuple(len(c) for _, c, _ in spec)
            if math.prod(shape) > self.max_tensor_size:
                raise CapacityError(f"resource {j} tensor of shape {shape} exceeds the size cap")
            total = np.full(shape, fixed_total[j], dtype=float)
            logw = np.full(shape, fixed_log[j])
            for ax, (_, counts, i) in enumerate(spec):
                view = [1] * len(spec)
                view[ax] = -1
                c = counts.reshape(view)
                total = total + c
                logw = logw + c * self.logx[j, i] - gammaln(c + 1)
            logw = logw + gammaln(total + 1)
            peak = logw.max()
            log_offset += peak
            operands.append(np.exp(logw - peak))
            subscripts.append("".join(label for label, _, _ in spec))
        for labels, tensor in extra_ops:
            operands.append(tensor)
            subscripts.append(labels)
        if not operands:
            return float(log_offset)
        expr = ",".join(subscripts) + "->"
        path = self._paths.get(expr)
        if path is None:
            path = np.einsum_path(expr, *operands, optimize="greedy")[0]
            self._paths[expr] = path
        value = float(np.einsum(expr, *operands, optimize=path))
        if value <= 0.0:
            return -math.inf
        return float(math.log(value) + log_offset)

    def rates(self, m) -> np.ndarray:
        occ = _occupancy(m, self.polytope.n_routes)
        if occ is None:
            raise DomainError("rates are defined for nonnegative occupancies only")
        return self._rates(occ)

    def _rates(self, occ: np.ndarray) -> np.ndarray:
        if self.method == "chain":
            L = self._layout
            return chain_rates(occ, *L.args(), self._log_factorials(occ), self._ws)
        out = np.zeros(occ.size)
        if not occ.any():
            return out
        base = self._log_phi(occ)
        for i in np.flatnonzero(occ):
            occ[i] -= 1
            out[i] = math.exp(self._log_phi(occ) - base)
            occ[i] += 1
        return out


def log_phi(m, polytope: ResourcePolytope) -> float:
    return PhiEvaluator(polytope).log_phi(m)


def phi_dp(m, polytope: ResourcePolytope) -> float:
    """Phi(m) via tensor contraction; 0 for any negative component."""
    value = log_phi(m, polytope)
    if value == -math.inf:
        return 0.0
    if value > 709.0:
        raise CapacityError(f"Phi(m) = exp({value:.1f}) overflows a double; use log_phi")
    return math.exp(value)


def sfa_rates(m, polytope: ResourcePolytope) -> np.ndarray:
    return PhiEvaluator(polytope).rates(m)


class SfaRates:
    """Memoised SFA rate function for one polytope (one instance per simulator)."""

    def __init__(self, polytope: ResourcePolytope, cache_size: int = 1 << 18):
        self.evaluator = PhiEvaluator(polytope)
        self._cached = lru_cache(maxsize=cache_size)(self._compute)

    def _compute(self, key: tuple[int, ...]) -> tuple[float, ...]:
        return tuple(self.evaluator._rates(np.array(key, dtype=np.int64)).tolist())

    def __call__(self, key: tuple[int, ...]) -> tuple[float, ...]:
        return self._cached(key)

    def cache_info(self):
        return self._cached.cache_info()


def _stable_loads(rates, polytope: ResourcePolytope) -> np.ndarray:
    rho_tilde = polytope.resource_loads(rates)
    if np.any(rho_tilde >= 1.0):
        raise InstabilityError(f"resource loads {rho_tilde.tolist()} are not all below 1")
    return rho_tilde


def normalizer(rates, polytope: ResourcePolytope) -> float:
    """Phi = prod_j C_j / (C_j - sum_i R_ji lambda_i)."""
    return float(np.prod(1.0 / (1.0 - _stable_loads(rates, polytope))))


def stationary_pi(m, rates, polytope: ResourcePolytope, evaluator: PhiEvaluator | None = None) -> float:
    """pi(m) = Phi(m) / Phi * prod_i lambda_i ** m_i."""
    lam = _nonneg(rates, polytope.n_routes, "rates")
    rho_tilde = _stable_loads(lam, polytope)
    occ = _occupancy(m, polytope.n_routes)
    if occ is None:
        return 0.0
    if np.any((lam == 0) & (occ > 0)):
        return 0.0
    ev = evaluator or PhiEvaluator(polytope)
    with np.errstate(divide="ignore"):
        log_lam = np.where(occ > 0, np.log(lam), 0.0)
    return math.exp(ev._log_phi(occ) + float(occ @ log_lam) + float(np.log1p(-rho_tilde).sum()))


def resource_marginals(levels, rho_tilde) -> float:
    """prod_j (1 - rho_j) rho_j ** L_j."""
    rho = np.asarray(rho_tilde, dtype=float).ravel()
    L = np.asarray(levels).ravel()
    if L.shape != rho.shape:
        raise DomainError("levels and loads must have the same length")
    if np.any(rho >= 1.0) or np.any(rho < 0):
        raise InstabilityError(f"resource loads {rho.tolist()} must lie in [0, 1)")
    if np.any(L < 0):
        return 0.0
    return float(np.prod((1.0 - rho) * rho ** L))


def _geometric_convolution(rho_tilde: np.ndarray, max_level: int) -> np.ndarray:
    """P(sum_j G_j = L) for L = 0..max_level with independent G_j ~ Geom(rho_j) on {0,1,...}."""
    dist = np.zeros(max_level + 1)
    dist[0] = 1.0
    for rho in rho_tilde:
        pmf = (1.0 - rho) * rho ** np.arange(max_level + 1)
        dist = np.convolve(dist, pmf)[: max_level + 1]
    return dist


def total_count_distribution(L: int, rates, polytope: ResourcePolytope) -> float:
    """P(sum_i m_i = L) under pi, as a convolution of per-resource geometrics."""
    if L < 0:
        return 0.0
    rho_tilde = _stable_loads(rates, polytope)
    return float(_geometric_convolution(rho_tilde, int(L))[int(L)])


def total_count_pmf(max_level: int, rates, polytope: ResourcePolytope) -> np.ndarray:
    return _geometric_convolution(_stable_loads(rates, polytope), int(max_level))


def truncation_remainder(max_level: int, rates, polytope: ResourcePolytope) -> float:
    """P(sum_i m_i > max_level), the mass lost by truncating a sum over occupancies."""
    pmf = total_count_pmf(max_level, rates, polytope)
    return max(0.0, 1.0 - float(math.fsum(pmf)))


def total_count_by_enumeration(L: int, rates, polytope: ResourcePolytope) -> float:
    """Sum of pi(m) over all occupancies with |m| = L."""
    ev = PhiEvaluator(polytope)
    return float(
        sum(stationary_pi(m, rates, polytope, ev) for m in _compositions(int(L), polytope.n_routes))
    )


def pi_tilde(split: dict, rates, polytope: ResourcePolytope) -> float:
    """Multiclass measure of a split given as ``{(j, i): count}`` over pairs with R_ji > 0."""
    lam = _nonneg(rates, polytope.n_routes, "rates")
    rho_tilde = _stable_loads(lam, polytope)
    x = polytope.r_matrix / polytope.capacities[:, None]
    log_w = float(np.log1p(-rho_tilde).sum())
    per_resource: dict[int, list[int]] = {}
    for (j, i), c in split.items():
        if x[j, i] <= 0:
            raise DomainError(f"pair {(j, i)} is not a resource-route pair")
        if c < 0:
            return 0.0
        if c:
            if lam[i] == 0:
                return 0.0
            log_w += c * math.log(x[j, i] * lam[i]) - math.lgamma(c + 1)
        per_resource.setdefault(j, []).append(c)
    for counts in per_resource.values():
        log_w += math.lgamma(sum(counts) + 1)
    return math.exp(log_w)


def resource_levels_by_enumeration(levels, rates, polytope: ResourcePolytope) -> float:
    """Sum of pi_tilde over every split whose per-resource totals equal ``levels``."""
    R = polytope.r_matrix
    L = [int(v) for v in levels]
    per_resource = []
    for j in range(polytope.rank):
        users = list(np.flatnonzero(R[j] > 0))
        per_resource.append([dict(zip([(j, i) for i in users], c)) for c in _compositions(L[j], len(users))])
    total = 0.0
    for combo in itertools.product(*per_resource):
        split = {}
        for part in combo:
            split.update(part)
        total += pi_tilde(split, rates, polytope)
    return total


def mean_workload(rho_tilde) -> float:
    """Mean total residual workload: 0.5 * sum_j rho_j / (1 - rho_j)."""
    rho = np.asarray(rho_tilde, dtype=float).ravel()
    if np.any(rho >= 1.0) or np.any(rho < 0):
        raise InstabilityError(f"resource loads {rho.tolist()} must lie in [0, 1)")
    return float(0.5 * np.sum(rho / (1.0 - rho)))


def _positive_root(f, tol: float = ROOT_TOL) -> float:
    """Bisection for the positive root of a convex f with f(0) = 0, f < 0 just above 0."""
    hi = 1.0
    while f(hi) <= 0.0:
        hi *= 2.0
        if hi > 1e6:
            raise DomainError("could not bracket a positive root")
    lo = 0.0
    while True:
        mid = 0.5 * (lo + hi)
        val = f(mid)
        if val < 0.0:
            lo = mid
        else:
            hi = mid
        if abs(val) < tol and hi - lo < 1e-12 or hi - lo <= 4e-16 * hi:
            return mid


def tail_exponent(rho: float) -> float:
    """Positive root theta of rho * (exp(theta) - 1) = theta."""
    rho = float(rho)
    if not 0.0 < rho < 1.0:
        raise DomainError(f"tail exponent needs 0 < rho < 1, got {rho}")
    return _positive_root(lambda t: rho * math.expm1(t) - t)


def lower_bound_exponents(rates, polytope: ResourcePolytope) -> tuple[np.ndarray, float]:
    """Per-resource theta_j solving sum_i lambda_i (exp(R_ji theta / C_j) - 1) = theta, and their min."""
    lam = _nonneg(rates, polytope.n_routes, "rates")
    if load(lam, polytope) >= 1.0:
        raise InstabilityError("lower-bound exponents need rho(lambda) < 1")
    x = polytope.r_matrix / polytope.capacities[:, None]
    thetas = np.empty(polytope.rank)
    for j in range(polytope.rank):
        row = x[j]
        if not np.any(row * lam > 0):
            thetas[j] = math.inf
            continue
        thetas[j] = _positive_root(lambda t, row=row: float(np.sum(lam * np.expm1(row * t))) - t)
    return thetas, float(thetas.min())


def md1_lower_bound(n: int, rho: float) -> float:
    """n rho / (2 (1 - rho)): summed M/D/1 means over n output ports."""
    if not 0.0 <= rho < 1.0:
        raise DomainError(f"M/D/1 bound needs 0 <= rho < 1, got {rho}")
    return n * rho / (2.0 * (1.0 - rho))


@dataclass(frozen=True)
class ProductFormSummary:
    rho_tilde: np.ndarray
    phi_norm: float
    mean_workload: float
    theta_star: float


def summarize(rates, polytope: ResourcePolytope) -> ProductFormSummary:
    rho_tilde = _stable_loads(rates, polytope)
    rho = float(rho_tilde.max())
    return ProductFormSummary(
        rho_tilde=rho_tilde,
        phi_norm=float(np.prod(1.0 / (1.0 - rho_tilde))),
        mean_workload=mean_workload(rho_tilde),
        theta_star=tail_exponent(rho) if rho > 0 else math.inf,
    )


def mean_queue_bound(rho_tilde, k_max: int, n_queues: int) -> float:
    """Mean total queue bound 0.5 * sum rho_j/(1-rho_j) + K (N + 2)."""
    return mean_workload(rho_tilde) + k_max * (n_queues + 2)


def analytic_report(rates, polytope: ResourcePolytope, k_max: int, uniform_ports: int | None = None) -> list:
    """Rows of (quantity, parameters, value)."""
    lam = _nonneg(rates, polytope.n_routes, "rates")
    summary = summarize(lam, polytope)
    rho = float(summary.rho_tilde.max())
    n = polytope.n_routes
    rows = [("rho", "", rho)]
    rows += [("rho_tilde", f"j={j}", float(v)) for j, v in enumerate(summary.rho_tilde)]
    rows += [
        ("phi_norm", "", summary.phi_norm),
        ("mean_workload", "", summary.mean_workload),
        ("mean_total_count", "", float(np.sum(summary.rho_tilde / (1 - summary.rho_tilde)))),
        ("mean_queue_bound", f"K={k_max};N={n}", mean_queue_bound(summary.rho_tilde, k_max, n)),
        ("theta_star", f"rho={rho:.6g}", summary.theta_star),
    ]
    thetas, theta_min = lower_bound_exponents(lam, polytope)
    rows += [("lower_bound_exponent", f"j={j}", float(t)) for j, t in enumerate(thetas)]
    rows.append(("lower_bound_exponent_min", "", theta_min))
    if uniform_ports:
        rows.append(("md1_lower_bound", f"n={uniform_ports};rho={rho:.6g}", md1_lower_bound(uniform_ports, rho)))
    return rows


def report_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["quantity", "parameters", "value"])
    for q, p, v in rows:
        writer.writerow([q, p, repr(float(v))])
    return buf.getvalue()
