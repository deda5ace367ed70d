"""Compiled per-slot decomposition pipeline.

Array version of ``solve_primal -> tighten -> caratheodory_reduce`` followed by
the emulation policy's schedule choice.  Coefficients live in a dense vector
indexed like ``ScheduleSet.schedules``; the pivot and tie-breaking rules are
the same as in :mod:`switchlab.core`, and the tests hold the two to identical
answers.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .core import TOL, Decomposition, ScheduleSet
from .errors import ContractError, LPError, ReductionError
from .lp import _OK, _solve


@njit(cache=True)
def _covering(d, mat, maximal):
    n = d.size
    k = maximal.size
    A = np.zeros((n, k + n))
    for j in range(k):
        A[:, j] = mat[maximal[j]]
    for i in range(n):
        A[i, k + i] = -1.0
    c = np.zeros(k + n)
    c[:k] = 1.0
    x, status = _solve(c, A, d, 10_000)
    alpha = np.zeros(mat.shape[0])
    for j in range(k):
        alpha[maximal[j]] = x[j]
    return alpha, status


@njit(cache=True)
def _tighten(alpha, d, mat, sub_index, tol):
    n = d.size
    covered = mat.T @ alpha
    gap = covered - d
    for i in range(n):
        if gap[i] < -tol:
            return 1
    for i in range(n):
        while gap[i] > tol:
            best = -1
            for s in range(alpha.size):  # heaviest atom, lowest index on ties
                if mat[s, i] == 1.0 and alpha[s] > 0.0:
                    if best < 0 or alpha[s] > alpha[best]:
                        best = s
            if best < 0:
                return 2
            a = alpha[best]
            eps = min(a, gap[i])
            if a - eps <= tol * 1e-3:
                eps = a
                alpha[best] = 0.0
            else:
                alpha[best] = a - eps
            alpha[sub_index[best, i]] += eps
            gap[i] -= eps
    return 0


@njit(cache=True)
def _reduce(alpha, mat, tol):
    n = mat.shape[1]
    while True:
        idx = np.flatnonzero(alpha > 0.0)
        if idx.size <= n + 1:
            return 0
        M = np.ones((n + 1, idx.size))
        for c in range(idx.size):
            M[:n, c] = mat[idx[c]]
        _, _, vt = np.linalg.svd(M)
        v = vt[-1].copy()
        if np.abs(M @ v).max() > 1e-10 * max(1.0, np.abs(v).max()):
            return 1
        if v.max() <= 0.0:
            v = -v
        best = -1
        ratio = np.inf
        for c in range(idx.size):
            if v[c] > 1e-14:
                r = alpha[idx[c]] / v[c]
                if r < ratio:
                    ratio = r
                    best = c
        if best < 0:
            return 2
        for c in range(idx.size):
            alpha[idx[c]] -= ratio * v[c]
        alpha[idx[best]] = 0.0
        for c in range(idx.size):
            a = alpha[idx[c]]
            if a < -1e-12:
                return 3
            if a <= 1e-15:
                alpha[idx[c]] = 0.0


@njit(cache=True)
def _pipeline(d, mat, maximal, sub_index, tol):
    alpha, status = _covering(d, mat, maximal)
    if status != _OK:
        return alpha, 10 + status
    status = _tighten(alpha, d, mat, sub_index, tol)
    if status != 0:
        return alpha, 20 + status
    status = _reduce(alpha, mat, tol)
    if status != 0:
        return alpha, 30 + status
    return alpha, 0


@njit(cache=True)
def _choose(d, mat, maximal, sub_index, sizes, zero_index, tol):
    # An atom with coefficient >= 1 lies below d, so it needs some d_i >= 1.
    if d.size == 0 or d.max() < 1.0 - tol:
        return zero_index, False, 0
    d = np.maximum(d, 0.0)  # D picks up rounding noise of order tol below zero
    alpha, status = _pipeline(d, mat, maximal, sub_index, tol)
    if status != 0:
        return -1, False, status
    alpha[zero_index] = 0.0
    best = np.argmax(alpha)  # first maximum = lexicographically smallest schedule
    if alpha[best] >= 1.0 - tol:
        return best, True, 0
    pick = zero_index
    for s in range(mat.shape[0]):
        if sizes[s] > sizes[pick]:
            ok = True
            for i in range(d.size):
                if mat[s, i] > d[i] + tol:
                    ok = False
                    break
            if ok:
                pick = s
    return pick, False, 0


def _raise(status: int, d) -> None:
    stage, code = divmod(status, 10)
    if stage == 1:
        raise LPError(f"covering LP failed with status {code} for target {list(d)}")
    if stage == 2:
        raise ContractError(f"tightening failed with status {code} for target {list(d)}")
    raise ReductionError(f"support reduction failed with status {code} for target {list(d)}")


class DecompositionEngine:
    """Per-schedule-set compiled decomposition and emulation-policy choice."""

    def __init__(self, sset: ScheduleSet, tol: float = TOL):
        self.sset = sset
        self.tol = tol
        self.mat = np.ascontiguousarray(sset.matrix, dtype=float)
        self.maximal = np.array([sset.index(s) for s in sset.maximal], dtype=np.int64)
        n = sset.n_queues
        sub = np.zeros((len(sset), n), dtype=np.int64)
        for k, s in enumerate(sset.schedules):
            for i in range(n):
                sub[k, i] = sset.index(s[:i] + (0,) + s[i + 1:])
        self.sub_index = sub
        self.sizes = self.mat.sum(axis=1)
        self.zero_index = sset.index(sset.zero)

    def decompose(self, target) -> np.ndarray:
        """Dense coefficient vector of the reduced equality decomposition."""
        d = np.maximum(np.asarray(target, dtype=float), 0.0)
        if not np.any(d > 0):
            return np.zeros(len(self.sset))
        alpha, status = _pipeline(d, self.mat, self.maximal, self.sub_index, self.tol)
        if status:
            _raise(status, d)
        return alpha

    def decomposition(self, target) -> Decomposition:
        alpha = self.decompose(target)
        atoms = tuple((self.sset.schedules[k], float(alpha[k])) for k in np.flatnonzero(alpha > 0))
        return Decomposition(atoms, self.sset.n_queues)

    def fallback(self, bound) -> int:
        feasible = np.all(self.mat <= np.asarray(bound)[None, :] + self.tol, axis=1)
        return int(np.argmax(np.where(feasible, self.sizes, -1.0)))

    def choose(self, target) -> tuple[int, bool]:
        """Index of the emulation policy's schedule and whether an atom >= 1 was used."""
        d = np.asarray(target, dtype=float)
        pick, via_atom, status = _choose(
            d, self.mat, self.maximal, self.sub_index, self.sizes, self.zero_index, self.tol
        )
        if status:
            _raise(status, d)
        return int(pick), bool(via_atom)
