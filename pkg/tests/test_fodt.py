import numpy as np
import pytest
from hypothesis import given, strategies as st

from edge_failover import fodt
from edge_failover.allocation import StrategyCache, baseline_strategy, validate_strategy
from edge_failover.delay_model import CLOUD, QueueState, RoutingMatrices, slot_delays
from edge_failover.fodt import RecoveryError, RecoveryPlan
from edge_failover.topology import generate_topology

from conftest import hand_topology, two_coverage_topology


def view(topo, strategy, queues=None):
    queues = queues or QueueState.empty(topo)
    return slot_delays(RoutingMatrices.from_strategy(strategy, topo), topo, queues)


def test_reverse_route_to_nearest_edge_ap():
    topo = two_coverage_topology()
    cov = topo.coverage_by_server[0]
    assert fodt.reverse_route(3, cov, topo) == [3, 0, 1, 2]
    assert fodt.reverse_route(2, cov, topo) == [2]
    assert fodt.reverse_route(4, cov, topo, target=2) == [4, 0, 1, 2]


def test_reverse_route_rejects_bad_arguments():
    topo = two_coverage_topology()
    cov = topo.coverage_by_server[0]
    with pytest.raises(RecoveryError):
        fodt.reverse_route(6, cov, topo)
    with pytest.raises(RecoveryError):
        fodt.reverse_route(3, cov, topo, target=1)


def test_select_accessing_ap_prefers_lower_delay():
    # AP 7 transmits at half the rate of AP 6, so 6 is the faster entry
    topo = two_coverage_topology()
    s = baseline_strategy(topo)
    assert fodt.select_accessing_ap(2, topo, s, view(topo, s)) == (6, 1)


def test_select_accessing_ap_tie_goes_to_lower_id():
    topo = two_coverage_topology(slow_seven=False)
    s = baseline_strategy(topo)
    assert fodt.select_accessing_ap(2, topo, s, view(topo, s)) == (6, 1)


def test_select_accessing_ap_without_operational_neighbour():
    topo = two_coverage_topology()
    s = baseline_strategy(topo)
    with pytest.raises(RecoveryError):
        fodt.select_accessing_ap(2, topo, s, view(topo, s), failed=[1])


def test_two_coverage_failure_reverses_through_edge_ap():
    topo = two_coverage_topology()
    s = baseline_strategy(topo)
    new, plan, cost = fodt.on_failure(0, topo, s, view(topo, s), load_aware=False)
    assert [e.accessing_ap for e in plan.entries] == [6] * 5
    assert {e.kind for e in plan.entries} == {"reversed"}
    assert new.routes[3][0].path == (3, 0, 1, 2, 6, 5)
    assert cost.writes == 5
    assert validate_strategy(new, topo, failed={0}).ok


def test_load_aware_pass_spreads_over_entries():
    topo = two_coverage_topology()
    s = baseline_strategy(topo)
    _, plan, _ = fodt.on_failure(0, topo, s, view(topo, s))
    assert plan.entries[0].accessing_ap == 6
    assert {e.accessing_ap for e in plan.entries} == {6, 7}


def test_direct_link_to_operational_server():
    # line 0-1-2 with servers on APs 0 and 2; the tie puts AP 1 under server 0
    topo = hand_topology(3, [(0, 1), (1, 2)], [0, 2])
    s = baseline_strategy(topo)
    assert s.server_of(1) == 0
    new, plan, _ = fodt.on_failure(0, topo, s, view(topo, s))
    entries = {e.ap: e for e in plan.entries}
    assert entries[1].kind == "direct"
    assert new.routes[1][0].path == (1, 2)
    assert entries[0].kind == "reversed"
    assert new.routes[0][0].path == (0, 1, 2)


def test_isolated_coverage_falls_back_to_cloud():
    # a single coverage has no edge AP, so every affected AP goes to the cloud
    topo = hand_topology(3, [(0, 1), (1, 2)], [0])
    s = baseline_strategy(topo)
    new, plan, _ = fodt.on_failure(0, topo, s, view(topo, s))
    assert plan.cloud_aps == [0, 1, 2]
    assert all(new.server_of(a) == CLOUD for a in range(3))


def test_plan_json_round_trip():
    topo = two_coverage_topology()
    s = baseline_strategy(topo)
    _, plan, _ = fodt.on_failure(0, topo, s, view(topo, s))
    assert RecoveryPlan.from_dict(plan.to_dict()) == plan
    assert plan.to_json() == RecoveryPlan.from_dict(plan.to_dict()).to_json()


def test_repair_restores_cached_routes():
    topo = two_coverage_topology()
    s = baseline_strategy(topo)
    cache = StrategyCache()
    failed, _, _ = fodt.on_failure(0, topo, s, view(topo, s), cache=cache)
    restored, cost = fodt.on_repair(0, topo, failed, cache)
    assert restored.routes == s.routes
    assert cost.evaluations == 0
    with pytest.raises(Exception):
        fodt.on_repair(0, topo, restored, cache)


@given(st.integers(0, 200))
def test_failure_only_touches_affected_aps(seed):
    topo = generate_topology(seed, 40, 0.2)
    s = baseline_strategy(topo)
    server = seed % topo.l
    new, plan, _ = fodt.on_failure(server, topo, s, view(topo, s))
    affected = s.members_of(server)
    assert {e.ap for e in plan.entries} == set(affected)
    for a in range(topo.m):
        if a not in affected:
            assert new.routes[a] == s.routes[a]
        assert new.server_of(a) != server
    assert validate_strategy(new, topo, failed={server}).ok


def test_five_fail_repair_cycles_return_to_baseline():
    topo = generate_topology(11, 60, 0.2)
    s = baseline_strategy(topo)
    cache = StrategyCache()
    rng = np.random.default_rng(0)
    queues = QueueState(rng.uniform(0, 3, topo.m), rng.uniform(0, 3, topo.l))
    current = s
    for k in range(5):
        server = k % topo.l
        current, _, _ = fodt.on_failure(server, topo, current, view(topo, current, queues), cache=cache)
        current, _ = fodt.on_repair(server, topo, current, cache)
        assert current.routes == s.routes


def test_second_failure_avoids_down_servers():
    topo = generate_topology(4, 60, 0.2)
    s = baseline_strategy(topo)
    cache = StrategyCache()
    first, _, _ = fodt.on_failure(0, topo, s, view(topo, s), cache=cache)
    second, _, _ = fodt.on_failure(1, topo, first, view(topo, first), {0}, cache)
    assert validate_strategy(second, topo, failed={0, 1}).ok
    assert all(second.server_of(a) not in (0, 1) for a in range(topo.m))
