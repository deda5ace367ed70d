"""Compiled coupled SN/BN slot loop for topologies with a chain layout.

Mirrors :func:`switchlab.sn.run_coupled` and :class:`switchlab.bn.BnState`
operation for operation, so both paths produce the same trajectory for the
same arrivals.  Python drives the loop chunk by chunk, growing buffers when
the kernel asks for it.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from ._chain import chain_rates
from .engine import _choose

EPS = 1e-12
TOL = 1e-9
INV_TOL = 1e-6

OK, GROW, VIOLATION, STARVED, DECOMPOSITION = 0, 1, 2, 3, 4

# violation slots; keep in step with sn.INVARIANTS
V_DOM_LO, V_DOM_HI, V_RHO_CEIL, V_SUM_CEIL, V_RHO_GROW, V_SIGMA, V_D_NEG, V_IDLE, V_CONS, V_SLOT_LOAD, V_DRIFT = range(11)


@njit(cache=True)
def _elapse(dt, clock, m, vclock, cum, phi):
    """cum[0] + cum[1] is S^SFA, kept by Neumaier summation over millions of segments."""
    if dt <= 0.0:
        return clock
    for i in range(m.size):
        if m[i]:
            vclock[i] += phi[i] / m[i] * dt
            x = phi[i] * dt
            s = cum[0, i]
            t = s + x
            if abs(s) >= abs(x):
                cum[1, i] += (s - t) + x
            else:
                cum[1, i] += (x - t) + s
            cum[0, i] = t
    return clock + dt


@njit(cache=True)
def _depart_due(m, head, targets, vclock, tsum):
    cap = targets.shape[1]
    gone = False
    for i in range(m.size):
        while m[i] > 0 and targets[i, head[i]] - vclock[i] < EPS:
            tsum[i] -= targets[i, head[i]]
            head[i] = (head[i] + 1) % cap
            m[i] -= 1
            gone = True
            if m[i] == 0:
                vclock[i] = 0.0
                tsum[i] = 0.0
    return gone


@njit(cache=True)
def _refresh(m, phi, single, steps, comps, logx, log_s, tables, lf, ws):
    r = chain_rates(m, single, steps, comps, logx, log_s, tables, lf, ws)
    for i in range(m.size):
        if m[i] > 0 and not r[i] > 0.0:
            return False
        phi[i] = r[i]
    return True


@njit(cache=True)
def _bn_run(t_end, inclusive, clock, m, head, targets, vclock, tsum, cum, phi,
            single, steps, comps, logx, log_s, tables, lf, ws):
    """Advance BN to ``t_end``; returns (clock, ok)."""
    n = m.size
    while True:
        best = np.inf
        route = -1
        for i in range(n):
            if m[i]:
                dt = (targets[i, head[i]] - vclock[i]) * m[i] / phi[i]
                if dt < best:
                    best = dt
                    route = i
        t_dep = clock + best
        if t_dep < t_end or (inclusive and t_dep <= t_end):
            clock = _elapse(best, clock, m, vclock, cum, phi)
            vclock[route] = targets[route, head[route]]
            _depart_due(m, head, targets, vclock, tsum)
            if not _refresh(m, phi, single, steps, comps, logx, log_s, tables, lf, ws):
                return clock, False
        else:
            clock = _elapse(t_end - clock, clock, m, vclock, cum, phi)
            clock = t_end
            # an arrival at t_end is processed before departures due at t_end
            if inclusive and _depart_due(m, head, targets, vclock, tsum):
                if not _refresh(m, phi, single, steps, comps, logx, log_s, tables, lf, ws):
                    return clock, False
            return clock, True


@njit(cache=True)
def coupled_chunk(
    slot0, counts, offsets, routes, starts,
    policy_emul, couple, strict, mw_alpha,
    mat, mat_int, maximal, sub_index, sizes, zero_index,
    R, C, k_max,
    q, cum_a, cum_b, cum_z, usage, d, s_prev, fstate,
    m, head, targets, vclock, tsum, cum, phi, bn_arrivals,
    single, steps, comps, logx, log_s, tables, lf, ws,
    viol, out_q, out_w, out_rho, out_sumd,
):
    """Run ``counts.shape[0]`` slots; returns (status, slots_done, detail).

    ``fstate`` holds [bn clock, rho(D) of the previous slot].
    """
    n = q.size
    n_slots = counts.shape[0]
    cap = targets.shape[1]
    rho_cap = n + 2 + INV_TOL
    sum_cap = k_max * (n + 2) + INV_TOL
    clock = fstate[0]
    rho_d = fstate[1]
    w_vec = np.zeros(n)
    new_d = np.zeros(n)
    delta = np.zeros(n)
    for k in range(n_slots):
        tau = slot0 + k
        for i in range(n):
            if m[i] + counts[k, i] >= cap:
                fstate[0] = clock
                fstate[1] = rho_d
                return GROW, k, 0
        if policy_emul:
            idx, via, status = _choose(d, mat, maximal, sub_index, sizes, zero_index, TOL)
            if status != 0:
                fstate[0] = clock
                fstate[1] = rho_d
                return DECOMPOSITION, k, status
        else:
            idx = 0
            best = -1.0
            for s in range(mat.shape[0]):
                wsum = 0.0
                for i in range(n):
                    if mat_int[s, i]:
                        wsum += float(q[i]) ** mw_alpha
                if wsum > best:
                    best = wsum
                    idx = s
        sigma = mat_int[idx]
        if policy_emul:
            for i in range(n):
                if sigma[i] > d[i] + INV_TOL:
                    viol[V_SIGMA] += 1
                    if strict:
                        fstate[0] = clock
                        fstate[1] = rho_d
                        return VIOLATION, k, V_SIGMA
                    break

        if couple:
            for a in range(starts[k], starts[k + 1]):
                r = routes[a]
                clock, ok = _bn_run(tau + offsets[a], False, clock, m, head, targets, vclock, tsum, cum, phi,
                                    single, steps, comps, logx, log_s, tables, lf, ws)
                if not ok:
                    fstate[0] = clock
                    return STARVED, k, 0
                target = vclock[r] + 1.0
                targets[r, (head[r] + m[r]) % cap] = target
                tsum[r] += target
                m[r] += 1
                bn_arrivals[r] += 1
                if not _refresh(m, phi, single, steps, comps, logx, log_s, tables, lf, ws):
                    fstate[0] = clock
                    return STARVED, k, 0
            clock, ok = _bn_run(float(tau + 1), True, clock, m, head, targets, vclock, tsum, cum, phi,
                                single, steps, comps, logx, log_s, tables, lf, ws)
            if not ok:
                fstate[0] = clock
                return STARVED, k, 0

        total_q = 0
        idle = False
        for i in range(n):
            served = min(q[i], sigma[i])
            cum_z[i] += sigma[i] - served
            q[i] = q[i] - served + counts[k, i]
            cum_a[i] += counts[k, i]
            cum_b[i] += sigma[i]
            total_q += q[i]
            if cum_z[i] != 0:
                idle = True
        usage[idx] += 1
        slot = tau + 1

        total_w = 0.0
        code = -1
        sum_d = 0.0
        if policy_emul:
            min_d = np.inf
            for i in range(n):
                total = cum[0, i] + cum[1, i]
                delta[i] = total - s_prev[i]
                s_prev[i] = total
                new_d[i] = d[i] - sigma[i] + delta[i]
                w_vec[i] = tsum[i] - m[i] * vclock[i]
                total_w += w_vec[i]
                sum_d += new_d[i]
                if new_d[i] < min_d:
                    min_d = new_d[i]
            new_rho = 0.0
            slot_load = 0.0
            for j in range(R.shape[0]):
                acc = 0.0
                acc_s = 0.0
                for i in range(n):
                    acc += R[j, i] * new_d[i]
                    acc_s += R[j, i] * delta[i]
                if acc / C[j] > new_rho:
                    new_rho = acc / C[j]
                if acc_s / C[j] > slot_load:
                    slot_load = acc_s / C[j]
            for i in range(n):
                if w_vec[i] > q[i] + INV_TOL:
                    code = V_DOM_LO
                    viol[V_DOM_LO] += 1
                    break
            for i in range(n):
                if q[i] > w_vec[i] + new_d[i] + INV_TOL:
                    code = V_DOM_HI
                    viol[V_DOM_HI] += 1
                    break
            if new_rho > rho_cap:
                code = V_RHO_CEIL
                viol[V_RHO_CEIL] += 1
            if sum_d > sum_cap:
                code = V_SUM_CEIL
                viol[V_SUM_CEIL] += 1
            if new_rho > rho_d + 1 + INV_TOL:
                code = V_RHO_GROW
                viol[V_RHO_GROW] += 1
            if min_d < -INV_TOL:
                code = V_D_NEG
                viol[V_D_NEG] += 1
            if idle:
                code = V_IDLE
                viol[V_IDLE] += 1
            if slot_load > 1 + TOL:
                code = V_SLOT_LOAD
                viol[V_SLOT_LOAD] += 1
            for i in range(n):
                d[i] = new_d[i]
            rho_d = new_rho
        elif couple:
            for i in range(n):
                total_w += tsum[i] - m[i] * vclock[i]
        if slot % 10_000 == 0:
            for i in range(n):
                if q[i] != cum_a[i] - cum_b[i] + cum_z[i]:
                    code = V_CONS
                    viol[V_CONS] += 1
                    break
            if policy_emul:
                drift = 0.0
                for i in range(n):
                    exact = s_prev[i] - cum_b[i]
                    drift = max(drift, abs(exact - d[i]))
                    d[i] = exact
                if drift > INV_TOL:
                    code = V_DRIFT
                    viol[V_DRIFT] += 1
                for i in range(n):
                    if abs(tsum[i] - m[i] * vclock[i] - (bn_arrivals[i] - (cum[0, i] + cum[1, i]))) > INV_TOL:
                        fstate[0] = clock
                        return STARVED, k, 1
        out_q[k] = total_q
        out_w[k] = total_w
        out_rho[k] = rho_d
        out_sumd[k] = sum_d
        if strict and code >= 0:
            fstate[0] = clock
            fstate[1] = rho_d
            return VIOLATION, k + 1, code
    fstate[0] = clock
    fstate[1] = rho_d
    return OK, n_slots, 0
