import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from switchlab.core import equality_decomposition, max_subschedule, monotone_close, solve_primal
from switchlab.engine import DecompositionEngine
from switchlab.errors import LPError
from switchlab.lp import simplex
from switchlab.topologies import independent_set, iq_switch

ORACLE_TOL = 1e-7


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_simplex_matches_highs_on_feasible_programs(m, extra, seed):
    rng = np.random.default_rng(seed)
    n = m + extra
    A = rng.uniform(-1, 2, (m, n))
    x0 = rng.uniform(0, 1, n)
    b = A @ x0
    c = rng.uniform(0.1, 2, n)
    res = simplex(c, A, b)
    ref = linprog(c, A_eq=A, b_eq=b, bounds=(0, None), method="highs")
    assert np.allclose(A @ res.x, b, atol=1e-8)
    assert np.all(res.x >= -1e-12)
    assert res.objective == pytest.approx(ref.fun, abs=ORACLE_TOL, rel=ORACLE_TOL)
    assert np.count_nonzero(res.x > 1e-12) <= m


def test_simplex_reports_infeasible():
    with pytest.raises(LPError):
        simplex([1, 1], [[1, 1]], [-1])


def test_simplex_reports_unbounded():
    with pytest.raises(LPError):
        simplex([-1, 0], [[1, -1]], [0])


with pytest.warns(UserWarning, match="conv"):  # the 5-cycle is not a perfect graph
    CYCLE5 = independent_set([[0, 1, 0, 0, 1], [1, 0, 1, 0, 0], [0, 1, 0, 1, 0], [0, 0, 1, 0, 1], [1, 0, 0, 1, 0]])

SETS = [
    monotone_close([(1, 1)]),
    iq_switch(2).schedule_set,
    iq_switch(3).schedule_set,
    CYCLE5.schedule_set,
]


@pytest.mark.parametrize("sset", SETS, ids=["full2", "iq2", "iq3", "c5"])
def test_engine_matches_reference_pipeline(sset):
    engine = DecompositionEngine(sset)
    rng = np.random.default_rng(11)
    n = sset.n_queues
    for _ in range(100):
        target = rng.uniform(0, 3, n) * rng.integers(0, 2, n)
        alpha = engine.decompose(target)
        vec = alpha @ sset.matrix
        assert np.abs(vec - target).max() <= 1e-9
        assert alpha.sum() == pytest.approx(solve_primal(target, sset).total, abs=1e-9)
        assert np.count_nonzero(alpha) <= n + 1
        ref = equality_decomposition(target, sset)
        assert ref.total == pytest.approx(alpha.sum(), abs=1e-9)


@pytest.mark.parametrize("sset", SETS, ids=["full2", "iq2", "iq3", "c5"])
def test_engine_choice_follows_policy_rule(sset):
    engine = DecompositionEngine(sset)
    rng = np.random.default_rng(5)
    n = sset.n_queues
    for _ in range(200):
        target = rng.uniform(0, 2.5, n)
        idx, via_atom = engine.choose(target)
        sigma = np.array(sset.schedules[idx])
        assert np.all(sigma <= target + 1e-9)
        alpha = engine.decompose(target)
        alpha[engine.zero_index] = 0
        if alpha.max() >= 1 - 1e-9:
            assert via_atom and alpha[idx] == alpha.max()
        else:
            assert not via_atom
            assert sset.schedules[idx] == max_subschedule(target, sset)


def test_engine_small_target_gives_zero_schedule():
    sset = iq_switch(2).schedule_set
    engine = DecompositionEngine(sset)
    idx, via_atom = engine.choose([0.5, 0.9, 0.2, 0.0])
    assert sset.schedules[idx] == (0, 0, 0, 0) and not via_atom
