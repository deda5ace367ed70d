"""Dense two-phase primal simplex with Bland's anti-cycling rule.

Sized for desk-scale problems (a few hundred columns at most).  Solves

    minimize    c @ x
    subject to  A @ x == b,  x >= 0

and returns a basic optimal solution.  The pivoting loops are compiled with
numba because the scheduling policy solves one LP per slot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import LPError

TOL = 1e-9

_OK, _UNBOUNDED, _STALLED, _INFEASIBLE = 0, 1, 2, 3


@dataclass(frozen=True)
class SimplexResult:
    x: np.ndarray
    objective: float


@njit(cache=True)
def _pivot(T, row, col):
    T[row] /= T[row, col]
    for r in range(T.shape[0]):
        if r != row:
            f = T[r, col]
            if f != 0.0:
                T[r] -= f * T[row]


@njit(cache=True)
def _run(T, basis, ncols, max_iter):
    m = T.shape[0] - 1
    for _ in range(max_iter):
        col = -1
        for j in range(ncols):  # Bland: lowest-index improving column
            if T[m, j] < -TOL:
                col = j
                break
        if col < 0:
            return _OK
        best = np.inf
        for r in range(m):
            if T[r, col] > TOL:
                ratio = T[r, -1] / T[r, col]
                if ratio < best:
                    best = ratio
        if best == np.inf:
            return _UNBOUNDED
        slack = TOL * max(1.0, abs(best))
        row = -1
        for r in range(m):  # Bland: among tied rows, lowest basic index leaves
            if T[r, col] > TOL and T[r, -1] / T[r, col] <= best + slack:
                if row < 0 or basis[r] < basis[row]:
                    row = r
        _pivot(T, row, col)
        basis[row] = col
    return _STALLED


@njit(cache=True)
def _solve(c, A, b, max_iter):
    m, n = A.shape
    T = np.zeros((m + 1, n + m + 1))
    for r in range(m):
        sign = -1.0 if b[r] < 0 else 1.0
        T[r, :n] = sign * A[r]
        T[r, n + r] = 1.0
        T[r, -1] = sign * b[r]
    for r in range(m):
        T[m, :n] -= T[r, :n]
        T[m, -1] -= T[r, -1]
    basis = np.arange(n, n + m)
    x = np.zeros(n)
    status = _run(T, basis, n + m, max_iter)
    if status != _OK:
        return x, status
    if -T[m, -1] > TOL * max(1.0, np.abs(b).sum()):
        return x, _INFEASIBLE

    keep = np.ones(m, dtype=np.bool_)
    for r in range(m):
        if basis[r] >= n:
            col = -1
            for j in range(n):
                if abs(T[r, j]) > TOL:
                    col = j
                    break
            if col < 0:
                keep[r] = False  # redundant equality
            else:
                _pivot(T, r, col)
                basis[r] = col
    rows = np.flatnonzero(keep)
    m2 = rows.size
    T2 = np.zeros((m2 + 1, n + 1))
    basis2 = np.empty(m2, dtype=np.int64)
    for k in range(m2):
        T2[k, :n] = T[rows[k], :n]
        T2[k, n] = T[rows[k], -1]
        basis2[k] = basis[rows[k]]
    T2[m2, :n] = c
    for k in range(m2):
        T2[m2] -= c[basis2[k]] * T2[k]
    status = _run(T2, basis2, n, max_iter)
    for k in range(m2):
        x[basis2[k]] = max(T2[k, -1], 0.0)
    return x, status


def simplex(c, A, b, max_iter: int = 10_000) -> SimplexResult:
    """Solve the standard-form LP ``min c.x  s.t.  A x = b, x >= 0``."""
    A = np.array(A, dtype=float, ndmin=2)
    b = np.array(b, dtype=float).ravel()
    c = np.array(c, dtype=float).ravel()
    m, n = A.shape
    if b.shape != (m,) or c.shape != (n,):
        raise ValueError("shape mismatch between c, A and b")
    x, status = _solve(c, A, b, max_iter)
    if status == _UNBOUNDED:
        raise LPError("linear program is unbounded")
    if status == _INFEASIBLE:
        raise LPError("linear program is infeasible")
    if status == _STALLED:
        raise LPError(f"simplex did not converge in {max_iter} iterations")
    return SimplexResult(x=x, objective=float(c @ x))
