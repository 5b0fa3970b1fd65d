import numpy as np
import pytest
from hypothesis import given, strategies as st

from edge_failover.allocation import AllocationStrategy, Route, baseline_strategy
from edge_failover.delay_model import (
    ApQueueState,
    CloudLink,
    DelayModelError,
    OfferedLoad,
    QueueState,
    RoutingMatrices,
    ServerQueueState,
    ap_offered_load,
    ap_queue_update,
    end_to_end_delay,
    processing_delay,
    server_offered_load,
    server_queue_update,
    slot_delays,
    transmission_delay,
)
from edge_failover.topology import AccessPoint, EdgeServer, make_topology

from conftest import hand_topology, line_topology


def _star(rates, shares):
    """APs 1..k relay through AP 0 toward a server on AP k+1."""
    k = len(rates)
    aps = [AccessPoint(0, (0, 0), 20.0, (), ())]
    aps += [AccessPoint(i + 1, (i + 1, 0), 20.0, (r,), (r,)) for i, r in enumerate(rates)]
    aps.append(AccessPoint(k + 1, (9, 9), 20.0, (), ()))
    edges = [(0, i + 1) for i in range(k)] + [(0, k + 1)]
    topo = make_topology(aps, [EdgeServer(0, k + 1, 40.0)], edges)
    routes = {0: (Route((0, k + 1), 0, 1.0),), k + 1: (Route((k + 1,), 0, 1.0),)}
    for i, share in enumerate(shares):
        own = [Route((i + 1, 0, k + 1), 0, share)]
        if share < 1:
            own.append(Route((i + 1,), -1, round(1 - share, 10)))
        routes[i + 1] = tuple(own)
    return topo, AllocationStrategy(routes)


def test_offered_load_empty():
    topo = line_topology(2, data=0.0)
    load = ap_offered_load(1, baseline_strategy(topo), topo)
    assert (load.from_users, load.from_neighbors) == (0.0, 0.0)


def test_offered_load_two_users():
    aps = [AccessPoint(0, (0, 0), 20.0, (4.0, 4.0), (1.0, 1.0)), AccessPoint(1, (1, 0), 20.0, (), ())]
    topo = make_topology(aps, [EdgeServer(0, 1, 40.0)], [(0, 1)])
    assert ap_offered_load(0, baseline_strategy(topo), topo).from_users == 8.0


def test_offered_load_from_three_upstream_aps():
    topo, strategy = _star([3.0, 4.0, 5.0], [1.0, 1.0, 0.5])
    assert ap_offered_load(0, strategy, topo).from_neighbors == pytest.approx(9.5)


def test_offered_load_unknown_ap():
    topo = line_topology(2)
    with pytest.raises(DelayModelError):
        ap_offered_load(7, baseline_strategy(topo), topo)


@pytest.mark.parametrize(
    "backlog, arrivals, f, expected", [(0.0, 0.0, 5.0, 0.0), (2.0, 10.0, 5.0, 7.0), (1.0, 2.0, 10.0, 0.0)]
)
def test_ap_queue_update(backlog, arrivals, f, expected):
    new = ap_queue_update(ApQueueState(0, backlog), OfferedLoad(arrivals, 0.0), f)
    assert new.backlog == expected
    assert new.slot == 1


def test_ap_queue_update_rejects_negative():
    with pytest.raises(DelayModelError):
        ap_queue_update(ApQueueState(0, -1.0), OfferedLoad(1.0), 5.0)


def test_transmission_delay():
    assert transmission_delay(ApQueueState(0, 10.0), 5.0) == 2.0
    assert transmission_delay(ApQueueState(0, 0.0), 5.0) == 0.0
    with pytest.raises(DelayModelError):
        transmission_delay(ApQueueState(0, 1.0), 0.0)


@given(st.lists(st.floats(0, 10), min_size=1, max_size=20), st.floats(0.5, 10))
def test_replay_matches_closed_form(arrivals, f):
    # from an empty queue, Q_H = max(0, max over k of sum_{z>=k} (a_z - f))
    state = ApQueueState(0)
    for h, a in enumerate(arrivals, 1):
        state = ap_queue_update(state, OfferedLoad(a), f)
        tails = [sum(x - f for x in arrivals[k:h]) for k in range(h)]
        assert state.backlog == pytest.approx(max(0.0, *tails), abs=1e-9)


def test_unrolled_recursion_without_clamping():
    state = ApQueueState(0, 1.0)
    for a in (7.0, 6.0, 8.0):
        state = ap_queue_update(state, OfferedLoad(a), 5.0)
    assert state.backlog == 1.0 + (7 + 6 + 8) - 3 * 5
    assert transmission_delay(state, 5.0) == pytest.approx(7.0 / 5.0)


def test_server_offered_load():
    topo = hand_topology(3, [(0, 1), (1, 2)], [1], data=3.0)
    strategy = baseline_strategy(topo)
    assert server_offered_load(0, strategy, topo) == 9.0
    topo2 = make_topology(
        [AccessPoint(0, (0, 0), 20, (3.0,), (3.0,)), AccessPoint(1, (1, 0), 20, (5.0,), (5.0,))],
        [EdgeServer(0, 0, 40.0)],
        [(0, 1)],
    )
    assert server_offered_load(0, baseline_strategy(topo2), topo2) == 8.0


def test_server_offered_load_matches_membership_sum():
    topo = hand_topology(6, [(i, i + 1) for i in range(5)], [0, 5], data=1.5)
    strategy = baseline_strategy(topo)
    for cov in topo.coverages:
        expected = sum(topo.aps[a].work_rate for a in cov.members)
        assert server_offered_load(cov.server, strategy, topo) == pytest.approx(expected)
    with pytest.raises(DelayModelError):
        server_offered_load(5, strategy, topo)


@pytest.mark.parametrize("backlog, t, f, expected", [(0, 0, 40, 0), (5, 50, 40, 15), (5, 10, 40, 0)])
def test_server_queue_update(backlog, t, f, expected):
    assert server_queue_update(ServerQueueState(0, backlog), t, f).backlog == expected


def test_processing_delay():
    assert processing_delay(ServerQueueState(0, 40.0), 40.0) == 1.0
    assert processing_delay(ServerQueueState(0, 0.0), 40.0) == 0.0
    with pytest.raises(DelayModelError):
        processing_delay(ServerQueueState(0, 1.0), 0.0)


def test_end_to_end_sum_of_parts():
    # one hop: AP 1 transmits its backlog, server 0 processes
    topo = hand_topology(2, [(0, 1)], [0], f_bs=5.0, f_es=40.0, data=0.0)
    queues = QueueState(np.array([0.0, 10.0]), np.array([40.0]))
    d = end_to_end_delay(1, 0, baseline_strategy(topo), topo, queues, with_arrivals=False)
    assert d == pytest.approx(2.0 + 1.0)


def test_colocated_ap_empty_queues_zero_delay():
    topo = hand_topology(2, [(0, 1)], [0], data=0.0)
    assert end_to_end_delay(0, 0, baseline_strategy(topo), topo, QueueState.empty(topo)) == 0.0


def test_two_hop_path_walk():
    topo = hand_topology(3, [(0, 1), (1, 2)], [0], f_bs=4.0, f_es=10.0, data=0.0)
    queues = QueueState(np.array([0.0, 2.0, 6.0]), np.array([5.0]))
    d = end_to_end_delay(2, 0, baseline_strategy(topo), topo, queues, with_arrivals=False)
    # path 2 -> 1 -> 0: AP 2 and AP 1 transmit, server processes
    assert d == pytest.approx(6 / 4 + 2 / 4 + 5 / 10)


def test_end_to_end_wrong_server():
    topo = hand_topology(3, [(0, 1), (1, 2)], [0, 2])
    with pytest.raises(DelayModelError):
        end_to_end_delay(0, 1, baseline_strategy(topo), topo, QueueState.empty(topo))


def test_arrivals_count_in_sojourn_delay():
    topo = hand_topology(2, [(0, 1)], [0], f_bs=10.0, f_es=20.0, data=4.0)
    view = slot_delays(RoutingMatrices.from_strategy(baseline_strategy(topo), topo), topo, QueueState.empty(topo))
    # AP 1 sends 4 Mbit at 10 Mbit/s; server gets 8 MFLOP at 20 MFLOP/s
    assert view.e2e[1] == pytest.approx(0.4 + 0.4)
    assert view.e2e[0] == pytest.approx(0.4)


def test_cloud_delay():
    assert CloudLink(0.1, 100.0).delay(50.0) == pytest.approx(0.6)


@given(st.floats(0, 50), st.floats(0, 20), st.floats(0, 20), st.floats(1, 30))
def test_more_arrivals_never_shrink_backlog(q, a, extra, f):
    low = ap_queue_update(ApQueueState(0, q), OfferedLoad(a), f).backlog
    high = ap_queue_update(ApQueueState(0, q), OfferedLoad(a + extra), f).backlog
    assert high >= low >= 0


@given(st.lists(st.floats(0, 4.99), min_size=1, max_size=30))
def test_stable_queue_stays_empty(arrivals):
    state = ApQueueState(0)
    for a in arrivals:
        state = ap_queue_update(state, OfferedLoad(a), 5.0)
        assert state.backlog == 0.0
