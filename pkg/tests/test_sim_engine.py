import pytest

from edge_failover.failure_injection import scripted_schedule
from edge_failover.sim_engine import (
    ConfigError,
    MetricsRecord,
    SimulationConfig,
    build_topology,
    measure_convergence,
    run,
    sweep,
    worker_count,
)

def timeless(record):
    doc = record.to_dict()
    for e in doc["events"]:
        e.pop("wall_ms")
    return doc


SMALL = SimulationConfig(seed=3, m=60, mu=0.2, rho=0.3, horizon=80, warmup=10, validate=True)


def test_run_is_deterministic():
    a, b = run(SMALL), run(SMALL)
    assert a.delays_ms == b.delays_ms
    assert timeless(a) == timeless(b)


def test_record_json_round_trip():
    rec = run(SMALL)
    again = MetricsRecord.from_dict(rec.to_dict())
    assert again.to_json() == rec.to_json()


@pytest.mark.parametrize("policy", ["fodt", "cloud_assistant", "greedy", "global_recompute"])
def test_runs_conserve_work_and_stay_valid(policy):
    rec = run(SMALL.replace(policy=policy))
    assert rec.invalid_strategies == 0
    assert rec.conservation_error < 1e-6
    assert len(rec.delays_ms) == SMALL.horizon
    assert rec.mean_delay_ms > 0


def test_no_failures_means_no_events():
    rec = run(SMALL.replace(rho=0.0))
    assert rec.events == []
    assert rec.failed_fraction == 0.0


def test_scripted_failure_is_applied_and_repaired():
    topo = build_topology(SMALL)
    schedule = scripted_schedule([(0, 20, 40)], SMALL.horizon, range(topo.l))
    rec = run(SMALL, schedule, topo)
    assert [(e.slot, e.server, e.kind) for e in rec.events] == [(20, 0, "fail"), (40, 0, "repair")]
    assert rec.extremes.failed_max == 1


def test_fodt_cycle_cost():
    cost = measure_convergence(SMALL, server=0)
    assert cost.repair.evaluations == 0
    assert cost.count == cost.failure.count + cost.repair.count > 0
    with pytest.raises(ConfigError):
        measure_convergence(SMALL, server=999)


def test_zero_replications_is_empty():
    assert sweep(SMALL, [0.1], [0.2], 0) == []


def test_sweep_order_and_seeds():
    recs = sweep(SMALL.replace(horizon=30), [0.1, 0.4], [0.2], 2, policies=["fodt", "greedy"], workers=1)
    keys = [(r.config["rho"], r.config["policy"], r.config["seed"]) for r in recs]
    assert keys == [
        (0.1, "fodt", 3), (0.1, "fodt", 4), (0.1, "greedy", 3), (0.1, "greedy", 4),
        (0.4, "fodt", 3), (0.4, "fodt", 4), (0.4, "greedy", 3), (0.4, "greedy", 4),
    ]


def test_parallel_sweep_matches_sequential():
    base = SMALL.replace(horizon=30)
    seq = sweep(base, [0.3], [0.2], 2, workers=1)
    par = sweep(base, [0.3], [0.2], 2, workers=2)
    assert [timeless(r) for r in seq] == [timeless(r) for r in par]


@pytest.mark.parametrize(
    "changes",
    [dict(horizon=0), dict(warmup=80), dict(rho=1.2), dict(policy="x"), dict(mu=None), dict(f_bs_range=(5, 1))],
)
def test_bad_configs(changes):
    with pytest.raises(ConfigError):
        SMALL.replace(**changes)


def test_from_mapping_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="bogus"):
        SimulationConfig.from_mapping({"bogus": 1})
    assert SimulationConfig.from_mapping({"users_per_ap": [1, 2]}).users_per_ap == (1, 2)


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("EDGE_FAILOVER_WORKERS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("EDGE_FAILOVER_WORKERS", "zero")
    with pytest.raises(ConfigError):
        worker_count()
