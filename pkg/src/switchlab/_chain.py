"""Compiled Phi evaluation when every route uses at most two resources.

If in addition no resource carries more than two split routes, each resource
tensor is a matrix, every split index joins exactly two of them, and the
factor graph falls apart into paths and cycles.  A cycle contracts to the
trace of a matrix product; a path is a cycle closed by a length-one index.

All entries carry a factor s**(packets counted), with s the reciprocal of the
largest row sum of x = R / C.  This keeps every entry of a resource matrix in
(0, 1] and is the same overall factor s**|m| whichever way packets split.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit
from scipy.special import gammaln

from .core import ResourcePolytope

TABLE_CAP = 160


class ChainLayout:
    """Static contraction order for a polytope, or ``None`` fields if ineligible."""

    def __init__(self, polytope: ResourcePolytope):
        R = polytope.r_matrix
        J, N = R.shape
        routes = [list(np.flatnonzero(R[:, i] > 0)) for i in range(N)]
        self.eligible = all(len(r) <= 2 for r in routes)
        if not self.eligible:
            return
        single = np.full(N, -1, dtype=np.int64)
        # per resource: list of (route, side) for its split axes
        axes = [[] for _ in range(J)]
        for i, res in enumerate(routes):
            if len(res) == 1:
                single[i] = res[0]
            else:
                axes[res[0]].append((i, 0))
                axes[res[1]].append((i, 1))
        if any(len(a) > 2 for a in axes):
            self.eligible = False
            return
        steps = []  # (resource, in_route, in_side, out_route, out_side)
        comps = []  # (start, length, is_cycle)
        seen = np.zeros(J, dtype=bool)

        def other_end(route, j):
            a, b = routes[route]
            return b if j == a else a

        def walk(start, via):
            """Follow the chain from ``start`` leaving through split axis ``via``."""
            order = [(start, None, via)]
            seen[start] = True
            j, incoming = start, via
            while incoming is not None:
                nxt = other_end(incoming[0], j)
                if nxt == start:
                    return order, True
                seen[nxt] = True
                out = [ax for ax in axes[nxt] if ax[0] != incoming[0]]
                out_ax = out[0] if out else None
                order.append((nxt, incoming, out_ax))
                j, incoming = nxt, out_ax
            return order, False

        # paths first, started from an end (resource with < 2 axes)
        for j in range(J):
            if not seen[j] and len(axes[j]) < 2:
                order, _ = walk(j, axes[j][0] if axes[j] else None)
                comps.append((len(steps), len(order), False))
                steps.extend(order)
        for j in range(J):
            if not seen[j]:
                order, cyc = walk(j, axes[j][0])
                assert cyc
                first = order[0]
                order[0] = (first[0], order[-1][2], first[2])
                comps.append((len(steps), len(order), True))
                steps.extend(order)

        def side(route, j):
            return 0 if routes[route][0] == j else 1

        table = np.full((len(steps), 5), -1, dtype=np.int64)
        for k, (j, inc, out) in enumerate(steps):
            table[k, 0] = j
            if inc is not None:
                table[k, 1] = inc[0]
                table[k, 2] = side(inc[0], j)
            if out is not None:
                table[k, 3] = out[0]
                table[k, 4] = side(out[0], j)
        self.single = single
        self.steps = table
        self.comps = np.array(comps, dtype=np.int64).reshape(-1, 3)
        x = R / polytope.capacities[:, None]
        with np.errstate(divide="ignore"):
            self.logx = np.log(x)
        self.log_s = -math.log(x.sum(axis=1).max())
        self.table_cap = TABLE_CAP
        self.tables = self._tables(table, TABLE_CAP)

    def _tables(self, table: np.ndarray, cap: int) -> np.ndarray:
        """Scaled resource weights indexed by (in-route count, out-route count), per step."""
        lf = log_factorials(2 * cap)
        c = np.arange(cap + 1)
        out = np.zeros((len(table), cap + 1, cap + 1))
        for k, (j, in_r, _, out_r, _) in enumerate(table):
            a = c[:, None] if in_r >= 0 else np.zeros((1, 1), dtype=np.int64)
            b = c[None, :] if out_r >= 0 else np.zeros((1, 1), dtype=np.int64)
            logw = lf[a + b] - lf[a] - lf[b] + (a + b) * self.log_s
            if in_r >= 0:
                logw = logw + a * self.logx[j, in_r]
            if out_r >= 0:
                logw = logw + b * self.logx[j, out_r]
            out[k, : logw.shape[0], : logw.shape[1]] = np.exp(logw)
        return out

    def args(self):
        return self.single, self.steps, self.comps, self.logx, self.log_s, self.tables


def log_factorials(n: int) -> np.ndarray:
    """Table of log(k!) for k = 0..n."""
    return gammaln(np.arange(n + 1) + 1.0)


@njit(cache=True)
def _log_matrix_into(M, m, j, in_r, in_s, out_r, out_s, logx, log_s, fixed_tot, fixed_log, lf):
    """Fill M with the resource matrix built in log space and scaled by its peak; returns the peak."""
    n_in, n_out = M.shape
    peak = -np.inf
    for a in range(n_in):
        ca = 0
        la = 0.0
        if in_r >= 0:
            ca = a if in_s == 0 else m[in_r] - a
            la = ca * (logx[j, in_r] + log_s) - lf[ca]
        for b in range(n_out):
            cb = 0
            lb = 0.0
            if out_r >= 0:
                cb = b if out_s == 0 else m[out_r] - b
                lb = cb * (logx[j, out_r] + log_s) - lf[cb]
            v = la + lb + fixed_log[j] + lf[fixed_tot[j] + ca + cb]
            M[a, b] = v
            if v > peak:
                peak = v
    for a in range(n_in):
        for b in range(n_out):
            M[a, b] = math.exp(M[a, b] - peak)
    return peak


@njit(cache=True)
def _table_matrix_into(M, m, k, in_r, in_s, out_r, out_s, tables):
    n_in, n_out = M.shape
    T = tables[k]
    for a in range(n_in):
        ca = 0
        if in_r >= 0:
            ca = a if in_s == 0 else m[in_r] - a
        for b in range(n_out):
            cb = 0
            if out_r >= 0:
                cb = b if out_s == 0 else m[out_r] - b
            M[a, b] = T[ca, cb]


@njit(cache=True)
def _dims(m, s):
    return (m[s[1]] + 1 if s[1] >= 0 else 1), (m[s[3]] + 1 if s[3] >= 0 else 1)


@njit(cache=True)
def _step_into(M, m, k, steps, logx, log_s, fixed_tot, fixed_log, lf, tables):
    """Fill M (already sized) with the matrix of step k; returns its log scale."""
    s = steps[k]
    j = s[0]
    cap = tables.shape[1] - 1
    small = fixed_tot[j] == 0
    if s[1] >= 0 and m[s[1]] > cap:
        small = False
    if s[3] >= 0 and m[s[3]] > cap:
        small = False
    if small:
        _table_matrix_into(M, m, k, s[1], s[2], s[3], s[4], tables)
        return 0.0
    return _log_matrix_into(M, m, j, s[1], s[2], s[3], s[4], logx, log_s, fixed_tot, fixed_log, lf)


@njit(cache=True)
def _step_matrix(m, k, steps, logx, log_s, fixed_tot, fixed_log, lf, tables):
    r, c = _dims(m, steps[k])
    M = np.empty((r, c))
    peak = _step_into(M, m, k, steps, logx, log_s, fixed_tot, fixed_log, lf, tables)
    return M, peak


@njit(cache=True)
def _fixed(m, single, logx, log_s, lf, J):
    fixed_tot = np.zeros(J, dtype=np.int64)
    fixed_log = np.zeros(J)
    for i in range(m.size):
        j = single[i]
        if j >= 0 and m[i] > 0:
            fixed_tot[j] += m[i]
            fixed_log[j] += m[i] * (logx[j, i] + log_s) - lf[m[i]]
    return fixed_tot, fixed_log


@njit(cache=True)
def _normalised(P):
    scale = P.max()
    if scale > 0.0:
        P /= scale
    return P


@njit(cache=True)
def chain_log_phi(m, single, steps, comps, logx, log_s, tables, lf):
    """log Phi(m) as a sum over components of log trace(M_0 ... M_{L-1})."""
    J = logx.shape[0]
    for i in range(m.size):
        if m[i] < 0:
            return -np.inf
    fixed_tot, fixed_log = _fixed(m, single, logx, log_s, lf, J)
    total = -log_s * m.sum()
    for c in range(comps.shape[0]):
        start, length, cyc = comps[c, 0], comps[c, 1], comps[c, 2]
        P, off = _step_matrix(m, start, steps, logx, log_s, fixed_tot, fixed_log, lf, tables)
        P = P.copy()
        for k in range(start + 1, start + length):
            M, peak = _step_matrix(m, k, steps, logx, log_s, fixed_tot, fixed_log, lf, tables)
            P = P @ M
            scale = P.max()
            if scale <= 0.0:
                return -np.inf
            P /= scale
            off += peak + math.log(scale)
        v = 0.0
        if cyc:
            for a in range(P.shape[0]):
                v += P[a, a]
        else:
            v = P[0, 0]
        if v <= 0.0:
            return -np.inf
        total += off + math.log(v)
    return total


@njit(cache=True)
def _pair_trace(M, E, r0, nr, c_off):
    """sum over t < nr and x of M[r0 + t, x] * E[x, c_off + t]."""
    v = 0.0
    for t in range(nr):
        for x in range(M.shape[1]):
            v += M[r0 + t, x] * E[x, c_off + t]
    return v


@njit(cache=True)
def _matmul_into(A, B, out):
    """out = A @ B rescaled to max 1; BLAS only pays off past tiny sizes."""
    n, p = A.shape
    q = B.shape[1]
    if n * p * q > 1000:
        np.dot(A, B, out)
        top = out.max()
    else:
        top = 0.0
        for i in range(n):
            for j in range(q):
                out[i, j] = 0.0
            for k in range(p):
                a = A[i, k]
                for j in range(q):
                    out[i, j] += a * B[k, j]
            for j in range(q):
                if out[i, j] > top:
                    top = out[i, j]
    if top > 0.0:
        out /= top


@njit(cache=True)
def _view(ws, k, r, c):
    return ws[k, : r * c].reshape((r, c))


def workspace(layout: ChainLayout, size: int | None = None) -> np.ndarray:
    """Scratch buffer for :func:`chain_rates` covering counts up to ``size - 1``."""
    longest = int(layout.comps[:, 1].max()) if layout.comps.size else 1
    size = layout.table_cap + 1 if size is None else size
    return np.zeros((2 * longest + 3, size * size))


@njit(cache=True)
def chain_rates(m, single, steps, comps, logx, log_s, tables, lf, ws):
    """phi_i(m) = Phi(m - e_i) / Phi(m) for every route.

    For each matrix M_j of a component let E_j be the cyclic product of all
    the others, starting after j.  Then Phi = tr(M_j E_j), and dropping one
    packet of the split route between M_k and M_j only trims one column of
    M_k and one row of M_j.  Those sit at the ends of E_j (or of E_k), so the
    result is a partial trace of M_j and E_j (or of E_k and M_k).  Dropping a packet of a route confined to one resource
    rebuilds that resource's matrix and pairs it with its own E_j.

    ``ws`` is scratch space; a larger one is allocated if counts exceed it.
    """
    J = logx.shape[0]
    N = m.size
    out = np.zeros(N)
    top = 0
    for i in range(N):
        if m[i] + 1 > top:
            top = m[i] + 1
    longest = 1
    for c in range(comps.shape[0]):
        if comps[c, 1] > longest:
            longest = comps[c, 1]
    if top * top > ws.shape[1] or ws.shape[0] < 2 * longest + 3:
        ws = np.zeros((2 * longest + 3, top * top))
    s_factor = math.exp(log_s)
    fixed_tot, fixed_log = _fixed(m, single, logx, log_s, lf, J)
    rows = np.zeros(2 * longest + 3, dtype=np.int64)
    cols = np.zeros(2 * longest + 3, dtype=np.int64)
    need = np.zeros(longest, dtype=np.bool_)
    peaks = np.zeros(longest)
    env_of = np.zeros(longest, dtype=np.int64)
    bases = np.zeros(longest)
    for c in range(comps.shape[0]):
        start, L = comps[c, 0], comps[c, 1]
        for k in range(L):
            r, cc = _dims(m, steps[start + k])
            rows[k] = r
            cols[k] = cc
            peaks[k] = _step_into(_view(ws, k, r, cc), m, start + k, steps, logx, log_s, fixed_tot, fixed_log, lf, tables)
        # env[j] = M_{j+1} ... M_{L-1} M_0 ... M_{j-1}, rescaled to max 1.  A split
        # route sits between M_k and M_{k+1} and can pair with either env, so
        # envs at odd j (plus j = 0 for odd L) cover every route.
        for j in range(L):
            need[j] = (j % 2 == 1) or (j == 0 and L % 2 == 1)
        for u in range(N):
            if single[u] >= 0 and m[u] > 0:
                for k in range(L):
                    if steps[start + k, 0] == single[u]:
                        need[k] = True
        for j in range(L):
            if not need[j]:
                continue
            if L == 1:
                _view(ws, L, 1, 1)[0, 0] = 1.0
                rows[L] = 1
                cols[L] = 1
                env_of[0] = L
                continue
            if L == 2:
                env_of[j] = 1 - j
                continue
            src = (j + 1) % L
            for t in range(2, L):
                k = (j + t) % L
                dst = L + j if t == L - 1 else 2 * L + (t % 2)
                _matmul_into(_view(ws, src, rows[src], cols[src]), _view(ws, k, rows[k], cols[k]),
                             _view(ws, dst, rows[src], cols[k]))
                rows[dst] = rows[src]
                cols[dst] = cols[k]
                src = dst
            env_of[j] = L + j
        for j in range(L):
            if need[j]:
                e = env_of[j]
                bases[j] = _pair_trace(_view(ws, j, rows[j], cols[j]), _view(ws, e, rows[e], cols[e]), 0, rows[j], 0)
        for k in range(L):
            v = steps[start + k, 3]
            if v < 0 or m[v] == 0:
                continue
            j = (k + 1) % L
            r0 = 1 if steps[start + j, 2] == 1 else 0
            c_off = 1 if steps[start + k, 4] == 1 else 0
            if need[j]:
                e = env_of[j]
                val = _pair_trace(_view(ws, j, rows[j], cols[j]), _view(ws, e, rows[e], cols[e]), r0, m[v], c_off)
                out[v] = val / bases[j] * s_factor
            else:
                e = env_of[k]
                val = _pair_trace(_view(ws, e, rows[e], cols[e]), _view(ws, k, rows[k], cols[k]), r0, m[v], c_off)
                out[v] = val / bases[k] * s_factor
        spare = 2 * L + 2
        for k in range(L):
            j = steps[start + k, 0]
            for u in range(N):
                if single[u] != j or m[u] == 0:
                    continue
                dlog = logx[j, u] + log_s - lf[m[u]] + lf[m[u] - 1]
                fixed_tot[j] -= 1
                fixed_log[j] -= dlog
                M = _view(ws, spare, rows[k], cols[k])
                s = steps[start + k]
                peak = _log_matrix_into(M, m, j, s[1], s[2], s[3], s[4], logx, log_s, fixed_tot, fixed_log, lf)
                fixed_tot[j] += 1
                fixed_log[j] += dlog
                e = env_of[k]
                val = _pair_trace(M, _view(ws, e, rows[e], cols[e]), 0, rows[k], 0)
                out[u] = val / bases[k] * math.exp(peak - peaks[k]) * s_factor
    return out
