import json
import math

import numpy as np
import pytest

from switchlab.errors import CapacityError, ContractError, DomainError
from switchlab.topologies import Topology, from_spec, independent_set, iq_switch, parallel_vs_pooled, single_queue


def count_partial_permutations(n):
    # sum over k of C(n,k)^2 k!
    return sum(math.comb(n, k) ** 2 * math.factorial(k) for k in range(n + 1))


@pytest.mark.parametrize("n, size", [(1, 2), (2, 7), (3, 34)])
def test_switch_schedule_counts(n, size):
    topo = iq_switch(n)
    assert len(topo.schedule_set) == size == count_partial_permutations(n)
    assert topo.n_queues == n * n
    assert topo.rank == 2 * n
    assert topo.k_max == n


def test_switch_schedules_are_partial_permutations():
    topo = iq_switch(3)
    for s in topo.schedule_set:
        grid = np.array(s).reshape(3, 3)
        assert grid.sum(axis=0).max() <= 1 and grid.sum(axis=1).max() <= 1


def test_switch_labels_are_port_pairs():
    assert iq_switch(2).labels == ((1, 1), (1, 2), (2, 1), (2, 2))


def test_switch_size_limits():
    with pytest.raises(DomainError):
        iq_switch(0)
    with pytest.raises(CapacityError):
        iq_switch(5)


def test_path_graph_independent_sets():
    topo = independent_set([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    assert set(topo.schedule_set) == {(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1)}
    assert topo.rank == 2
    assert topo.exact_polytope


def test_isolated_node_gets_box_constraint():
    topo = independent_set([[0, 0], [0, 0]])
    assert len(topo.schedule_set) == 4
    assert topo.load([0.5, 0.9]) == pytest.approx(0.9)


def test_odd_cycle_falls_back_to_schedule_lp():
    adj = np.roll(np.eye(5, dtype=int), 1, axis=1)
    adj = adj + adj.T
    with pytest.warns(UserWarning):
        topo = independent_set(adj)
    assert not topo.exact_polytope
    # the all-halves point satisfies every edge constraint but needs 2.5 / 2 slots of schedule time
    assert topo.load(np.full(5, 0.5)) == pytest.approx(1.25, abs=1e-9)


@pytest.mark.parametrize("adj", [[[0, 1], [0, 0]], [[0, 2], [2, 0]], [[0, 1, 0]]])
def test_bad_adjacency_rejected(adj):
    with pytest.raises(DomainError):
        independent_set(adj)


def test_parallel_and_pooled():
    parallel, pooled = parallel_vs_pooled(3)
    assert len(parallel.schedule_set) == 8
    assert len(pooled.schedule_set) == 4
    lam = [0.2, 0.3, 0.1]
    assert parallel.load(lam) == pytest.approx(0.3)
    assert pooled.load(lam) == pytest.approx(0.6)


def test_single_queue():
    topo = single_queue()
    assert topo.name == "single" and topo.n_queues == 1
    assert topo.load([0.7]) == pytest.approx(0.7)


def test_polytope_must_admit_schedules():
    parallel, pooled = parallel_vs_pooled(2)
    with pytest.raises(ContractError):
        Topology("bad", parallel.schedule_set, pooled.polytope, (1, 2))


@pytest.mark.parametrize("spec, name", [("iq:2", "iq:2"), ("pooled:4", "pooled:4"), ("parallel:2", "parallel:2"),
                                        ("single", "single"), ("IQ:3", "iq:3")])
def test_from_spec(spec, name):
    assert from_spec(spec).name == name


@pytest.mark.parametrize("spec", ["iq:x", "ring:3", "iq:"])
def test_from_spec_rejects_garbage(spec):
    with pytest.raises(DomainError):
        from_spec(spec)


def test_from_spec_reads_files(tmp_path):
    graph = tmp_path / "g.json"
    graph.write_text(json.dumps({"adjacency": [[0, 1], [1, 0]]}))
    assert len(from_spec(f"independent-set:{graph}").schedule_set) == 3
    doc = tmp_path / "t.json"
    doc.write_text(json.dumps(iq_switch(2).to_json()))
    topo = from_spec(f"file:{doc}")
    assert topo.schedule_set == iq_switch(2).schedule_set
    assert topo.labels == iq_switch(2).labels
