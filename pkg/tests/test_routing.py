import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loggia.routing import (RoutingAction, delay_tree, follow, shortest_delays_us, sp_baseline, to_action_local,
                            to_action_single)

from conftest import random_topology
from oracles import brute_force_next_hops, floyd_warshall_us


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 7), st.booleans())
def test_single_matches_brute_force(seed, n, integer_weights):
    rng = np.random.default_rng(seed)
    topo = random_topology(rng, n)
    ne = len(topo.edges)
    w = rng.integers(1, 4, size=ne).astype(float) if integer_weights else rng.uniform(0.1, 5.0, size=ne)
    assert np.array_equal(to_action_single(topo, w).next_hop, brute_force_next_hops(topo, w))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 8))
def test_rows_name_neighbors_and_reach_destination(seed, n):
    rng = np.random.default_rng(seed)
    topo = random_topology(rng, n)
    w = rng.lognormal(0.0, 1.0, size=len(topo.edges))
    act = to_action_single(topo, w)
    for u in range(n):
        assert act.next_hop[u, u] == -1
        for z in range(n):
            if z == u:
                continue
            assert topo.has_link(u, int(act.next_hop[u, z]))
            path = follow(act, u, z)
            assert path is not None and path[-1] == z


def test_local_row_equals_single_row(mini5):
    w = np.random.default_rng(1).uniform(1, 3, size=12)
    single = to_action_single(mini5, w)
    for u in range(5):
        assert np.array_equal(to_action_local(mini5, u, w), single.row(u))


def test_tie_break_prefers_lower_first_hop(mini5):
    # all-equal weights: 1 -> 3 has two 2-hop paths (via 2 and via 4); first hop 2 wins
    act = to_action_single(mini5, np.ones(12))
    assert act.next_hop[1, 3] == 2
    assert act.next_hop[0, 4] == 1


def test_nonpositive_weights_rejected(mini5):
    w = np.ones(12)
    w[3] = 0.0
    with pytest.raises(ValueError):
        to_action_single(mini5, w)
    with pytest.raises(ValueError):
        to_action_single(mini5, np.ones(11))


def test_sp_metrics(mini5):
    e = mini5.edges.index((0, 1))
    assert sp_baseline(mini5, "EIGRP")[e] == pytest.approx(100.0 + 300.0)
    assert sp_baseline(mini5, "OSPF")[e] == pytest.approx(1.0)
    assert np.all(sp_baseline(mini5, "RIP") == 1.0)
    with pytest.raises(ValueError):
        sp_baseline(mini5, "BGP")


def test_eigrp_on_mini5_is_delay_shortest(mini5):
    # equal datarates: EIGRP ranks paths by delay, so 1 reaches 3 via 2 (8 ms) rather than via 4 (11 ms)
    act = to_action_single(mini5, sp_baseline(mini5, "EIGRP"))
    assert follow(act, 1, 3) == [1, 2, 3]


def test_action_equality():
    a = RoutingAction(np.array([[-1, 1], [0, -1]]))
    assert a == RoutingAction(a.next_hop.copy())
    assert a != RoutingAction(np.array([[-1, 1], [1, -1]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 9))
def test_shortest_delays_match_floyd_warshall(seed, n):
    topo = random_topology(np.random.default_rng(seed), n, int_delays=bool(seed % 2))
    k = shortest_delays_us(topo)
    assert np.array_equal(k, floyd_warshall_us(topo))
    assert np.array_equal(k, k.T)


def test_delay_tree_mini5(mini5):
    dist, parent = delay_tree(mini5, 1)
    assert dist == [3000, 0, 4000, 8000, 6000]
    assert parent == [1, -1, 1, 2, 1]
