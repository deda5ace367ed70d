import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from switchlab.core import (
    Decomposition,
    ResourcePolytope,
    ScheduleSet,
    as_schedule,
    caratheodory_reduce,
    equality_decomposition,
    from_json,
    load,
    max_subschedule,
    monotone_close,
    solve_primal,
    tighten,
    to_json,
)
from switchlab.errors import ContractError, DimensionError, DomainError
from switchlab.topologies import iq_switch

FULL2 = monotone_close([(1, 1)])


ORACLE_TOL = 1e-7  # HiGHS feasibility tolerance


def lp_oracle(target, sset):
    """Static planning optimum over every schedule, solved by HiGHS."""
    A = sset.matrix.T
    res = linprog(np.ones(len(sset)), A_ub=-A, b_ub=-np.asarray(target, float), bounds=(0, None), method="highs")
    assert res.status == 0
    return res.fun


@st.composite
def schedule_sets(draw, max_n=4):
    n = draw(st.integers(1, max_n))
    gens = draw(st.lists(st.lists(st.integers(0, 1), min_size=n, max_size=n), max_size=5))
    return monotone_close(gens, n)


@st.composite
def set_and_target(draw):
    sset = draw(schedule_sets())
    target = draw(st.lists(st.floats(0, 3, allow_nan=False), min_size=sset.n_queues, max_size=sset.n_queues))
    return sset, np.array(target)


# ---------------------------------------------------------------- monotone_close
def test_closure_of_full_schedule():
    assert set(FULL2) == {(0, 0), (1, 0), (0, 1), (1, 1)}


def test_closure_of_nothing_adds_zero_and_units():
    assert set(monotone_close([], 2)) == {(0, 0), (1, 0), (0, 1)}


def test_closure_of_2x2_matchings_has_seven_members():
    sset = monotone_close([(1, 0, 0, 1), (0, 1, 1, 0)])
    assert len(sset) == 7
    assert sset.k_max == 2


def test_closure_rejects_mixed_lengths():
    with pytest.raises(DimensionError):
        monotone_close([(1, 0), (1, 0, 1)])


def test_non_binary_schedule_rejected():
    with pytest.raises(DomainError):
        as_schedule((1, 2))


def test_schedule_set_must_be_monotone():
    units = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1)]
    with pytest.raises(ContractError):
        ScheduleSet(tuple(units + [(1, 1, 1)]), 3)
    with pytest.raises(ContractError):
        ScheduleSet(((0, 0), (1, 0)), 2)


@given(schedule_sets())
def test_closure_is_monotone_and_idempotent(sset):
    members = set(sset)
    for s in sset:
        for sub in itertools.product(*[(0, 1) if b else (0,) for b in s]):
            assert sub in members
    assert set(monotone_close(list(sset), sset.n_queues)) == members
    assert sset.k_max == max(sum(s) for s in sset)


# ---------------------------------------------------------------- load
def test_load_of_zero_is_zero():
    assert load([0, 0, 0, 0], iq_switch(2).polytope) == 0.0


def test_single_queue_load_is_rate():
    assert load([0.7], ResourcePolytope([[1.0]], [1.0])) == pytest.approx(0.7)


def test_switch_load_is_max_line_sum():
    lam = [0.3, 0.2, 0.1, 0.4]
    assert load(lam, iq_switch(2).polytope) == pytest.approx(0.6, abs=1e-12)


def test_load_rejects_negative_rate():
    with pytest.raises(DomainError):
        load([-0.1, 0, 0, 0], iq_switch(2).polytope)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=9, max_size=9))
def test_switch_load_formula_matches_lp(lam):
    topo = iq_switch(3)
    rho = load(lam, topo.polytope)
    assert rho == pytest.approx(solve_primal(lam, topo.schedule_set).total, abs=1e-9)
    assert rho == pytest.approx(lp_oracle(lam, topo.schedule_set), abs=ORACLE_TOL)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=4, max_size=4),
       st.lists(st.floats(0, 1, allow_nan=False), min_size=4, max_size=4))
def test_load_is_subadditive(a, b):
    sset = iq_switch(2).schedule_set
    ra, rb = solve_primal(a, sset).total, solve_primal(b, sset).total
    assert solve_primal(np.add(a, b), sset).total <= ra + rb + 1e-9


# ---------------------------------------------------------------- solve_primal
def test_primal_of_zero_target_is_empty():
    dec = solve_primal([0, 0], FULL2)
    assert dec.support == 0 and dec.total == 0


def test_primal_balanced_target():
    dec = solve_primal([0.5, 0.5], FULL2)
    assert dec.as_dict() == pytest.approx({(1, 1): 0.5})


def test_primal_unbalanced_target_total():
    dec = solve_primal([0.6, 0.2], FULL2)
    assert dec.total == pytest.approx(0.6)
    assert np.all(dec.vector() >= np.array([0.6, 0.2]) - 1e-12)


@settings(max_examples=80, deadline=None)
@given(set_and_target())
def test_primal_is_optimal_basic_and_covering(case):
    sset, target = case
    dec = solve_primal(target, sset)
    assert dec.total == pytest.approx(lp_oracle(target, sset), abs=ORACLE_TOL)
    assert dec.support <= sset.n_queues
    assert np.all(dec.vector() >= target - 1e-9)


# ---------------------------------------------------------------- tighten
def test_tighten_moves_gap_onto_subschedule():
    dec = tighten(Decomposition.from_mapping({(1, 1): 0.6}, 2), [0.6, 0.2])
    assert dec.as_dict() == pytest.approx({(1, 1): 0.2, (1, 0): 0.4})


def test_tighten_leaves_tight_input_alone():
    dec = Decomposition.from_mapping({(1, 1): 0.3, (1, 0): 0.2}, 2)
    assert tighten(dec, [0.5, 0.3]).as_dict() == pytest.approx(dec.as_dict())


def test_tighten_full_transfer():
    dec = tighten(Decomposition.from_mapping({(1, 1): 1.0}, 2), [1.0, 0.0])
    assert dec.as_dict() == pytest.approx({(1, 0): 1.0})


def test_tighten_rejects_non_covering_input():
    with pytest.raises(ContractError):
        tighten(Decomposition.from_mapping({(1, 0): 0.5}, 2), [0.6, 0.0])


@settings(max_examples=80, deadline=None)
@given(set_and_target())
def test_tighten_gives_exact_equality_and_keeps_total(case):
    sset, target = case
    primal = solve_primal(target, sset)
    dec = tighten(primal, target)
    assert np.abs(dec.vector() - target).max(initial=0) <= 1e-9
    assert dec.total == pytest.approx(primal.total, abs=1e-9)
    assert all(s in sset for s, _ in dec.atoms)


# ---------------------------------------------------------------- caratheodory_reduce
def test_reduce_keeps_small_support():
    dec = Decomposition.from_mapping({(1, 0): 0.5, (0, 1): 0.5}, 2)
    assert caratheodory_reduce(dec) == dec


def test_reduce_hand_example():
    dec = Decomposition.from_mapping({(1, 0): 0.5, (0, 1): 0.5, (1, 1): 0.5, (0, 0): 0.5}, 2)
    out = caratheodory_reduce(dec)
    assert out.support <= 3
    assert out.total == pytest.approx(2.0)
    assert out.vector() == pytest.approx([1.0, 1.0])


def test_reduce_single_atom_unchanged():
    dec = Decomposition.from_mapping({(1, 1): 0.7}, 2)
    assert caratheodory_reduce(dec) == dec


@settings(max_examples=60, deadline=None)
@given(schedule_sets(max_n=3), st.data())
def test_reduce_preserves_moments(sset, data):
    weights = data.draw(st.lists(st.floats(0.01, 2), min_size=len(sset), max_size=len(sset)))
    dec = Decomposition.from_mapping(dict(zip(sset.schedules, weights)), sset.n_queues)
    out = caratheodory_reduce(dec)
    assert out.support <= sset.n_queues + 1
    assert out.vector() == pytest.approx(dec.vector(), abs=1e-9)
    assert out.total == pytest.approx(dec.total, abs=1e-9)


# ---------------------------------------------------------------- max_subschedule
def test_max_subschedule_zero_bound():
    assert max_subschedule([0, 0], FULL2) == (0, 0)


def test_max_subschedule_respects_bound():
    assert max_subschedule([1.5, 0.3], FULL2) == (1, 0)


def test_max_subschedule_full():
    assert max_subschedule([2.0, 1.0], FULL2) == (1, 1)


def test_max_subschedule_ties_pick_lexicographically_smallest():
    sset = monotone_close([(1, 0), (0, 1)])
    assert max_subschedule([1, 1], sset) == (0, 1)


# ---------------------------------------------------------------- pipeline and serialization
@settings(max_examples=60, deadline=None)
@given(set_and_target())
def test_large_load_has_unit_atom(case):
    sset, target = case
    n = sset.n_queues
    target = target * (n + 1.5) / max(solve_primal(target, sset).total, 1e-3)
    dec = equality_decomposition(target, sset)
    if dec.total >= n + 1:
        assert max(a for _, a in dec.atoms) >= 1.0


def test_json_round_trip():
    topo = iq_switch(2)
    sset, poly = from_json(to_json(topo.schedule_set, topo.polytope))
    assert sset == topo.schedule_set
    assert np.array_equal(poly.r_matrix, topo.polytope.r_matrix)


def test_polytope_validation():
    with pytest.raises(DimensionError):
        ResourcePolytope([[1.0, 1.0]], [1.0, 1.0])
    with pytest.raises(DomainError):
        ResourcePolytope([[1.0, 0.0]], [1.0])
    with pytest.raises(DomainError):
        ResourcePolytope([[1.0]], [0.0])
