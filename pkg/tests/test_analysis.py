import math

import pytest
from hypothesis import given, strategies as st

from edge_failover.analysis import (
    AnalysisError,
    BoundCheck,
    RobustnessParams,
    approximation_ratio,
    check_record,
    complexity_check,
    extra_aps,
    latency_bound,
    max_extra_aps,
    omega_lower_bound,
    predicted_ratio,
    ratio_instance,
    spearman,
    tolerance_bound,
    tolerance_from_extra,
)
from edge_failover.failure_injection import scripted_schedule
from edge_failover.sim_engine import SimulationConfig, build_topology, run
from edge_failover.topology import generate_topology

PARAMS = RobustnessParams(
    f_bs_min=16, f_bs_max=24, f_es_min=32, f_es_max=48,
    queue_min=1.0, queue_max=10.0, task_min_mean=2.0, task_max=5.0, hops_max=3,
)


def test_omega_lower_bound_examples():
    assert omega_lower_bound(0.5, 1.5) == pytest.approx(2.0)
    assert omega_lower_bound(0.2, 1.0) == pytest.approx(1.0)
    with pytest.raises(AnalysisError):
        omega_lower_bound(0.0, 1.5)
    with pytest.raises(AnalysisError):
        omega_lower_bound(0.5, 0.0)


@given(st.floats(0.01, 1.0), st.floats(0.1, 5.0))
def test_ratio_at_omega_bound_is_one(rho, tau):
    assert predicted_ratio(rho, omega_lower_bound(rho, tau), tau) == pytest.approx(1.0)


def test_approximation_ratio_fields():
    est = approximation_ratio(12.0, 10.0, omega=2.0, tau=1.1, rho=0.1, m=30, l=5)
    assert est.eps_measured == pytest.approx(1.2)
    assert est.eps_predicted == pytest.approx(1.1 / 1.1)
    assert est.mean_coverage == pytest.approx(5.0)
    assert est.agreement == pytest.approx(1.2)
    assert est.to_dict()["gap"] == pytest.approx(0.2)
    with pytest.raises(AnalysisError):
        approximation_ratio(1.0, 0.0, 1.0, 1.0, 0.1)


def test_ratio_instance_small_network():
    topo = generate_topology(4, 9, n_servers=3)
    inst = ratio_instance(topo, [1])
    assert inst.oracle_delay <= inst.fodt_delay + 1e-9
    assert inst.estimate.eps_measured >= 1.0 - 1e-9
    assert inst.estimate.rho == pytest.approx(len(inst.affected) / topo.m)
    assert inst.tau > 0


def test_complexity_fit_recovers_exponent():
    traces = [(m, 3.0 * m**1.5) for m in (100, 200, 400, 800) for _ in range(2)]
    report = complexity_check(traces)
    assert report.exponent == pytest.approx(1.5)
    assert report.r_squared == pytest.approx(1.0)
    assert report.within(2.0, 0.5) and not report.within(2.0, 0.4)


def test_complexity_needs_three_sizes_and_positive_counts():
    with pytest.raises(AnalysisError):
        complexity_check([(100, 5), (200, 9)])
    with pytest.raises(AnalysisError):
        complexity_check([(100, 0), (200, 9), (300, 12)])


def test_max_extra_aps_by_hand():
    # ratio 48/24 = 2, spread 24/16 = 1.5: (2 * 2.25 * 16 * 0.5 - 1) / 2
    assert max_extra_aps(PARAMS, 0.5) == pytest.approx(17.5)
    with pytest.raises(AnalysisError):
        max_extra_aps(PARAMS, 0.0)


@pytest.mark.parametrize("lam", [0.25, 0.5, 1.0])
@pytest.mark.parametrize("m, l", [(300, 90), (100, 40), (500, 40)])
def test_tolerance_in_lambda_form(lam, m, l):
    assert tolerance_from_extra(lam * m / l, m, l) == min(l - 1, math.floor(lam * l / (1 + lam) + 1e-9))


def test_tolerance_edges():
    assert tolerance_from_extra(0.0, 300, 90) == 0
    assert tolerance_from_extra(-3.0, 300, 90) == 0
    assert tolerance_from_extra(1e9, 300, 90) == 89
    assert tolerance_bound(PARAMS, 0.5, 300, 90) == tolerance_from_extra(17.5, 300, 90)


def test_latency_bound_extremes():
    assert extra_aps(0, 300, 90) == 0.0
    assert latency_bound(0, 300, 90, PARAMS) == pytest.approx(4 * 10 / 16)
    n = 300 - 300 / 90
    assert latency_bound(89, 300, 90, PARAMS) == pytest.approx(4 * (10 + 5 * n) / 16)
    for bad in (-1, 90):
        with pytest.raises(AnalysisError):
            extra_aps(bad, 300, 90)


@given(st.integers(10, 400), st.integers(2, 60))
def test_latency_bound_grows_with_failures(m, l):
    bounds = [latency_bound(s, m, l, PARAMS) for s in range(l)]
    assert all(a <= b for a, b in zip(bounds, bounds[1:]))


def test_bad_params():
    with pytest.raises(AnalysisError):
        RobustnessParams(0, 1, 1, 1)
    with pytest.raises(AnalysisError):
        RobustnessParams(1, 1, 1, 1, task_max=0)


def test_bound_check_flags():
    inside = BoundCheck(2, 0.3, 1.0, True, 0.5, 4, True)
    assert inside.ok and inside.flags == "latency:pass;threshold:pass"
    broken = BoundCheck(2, 0.6, 1.0, True, 0.5, 4, False)
    assert broken.guarantee_broken and not broken.ok
    beyond = BoundCheck(6, 0.6, 1.0, True, 0.5, 4, False)
    assert beyond.ok and beyond.flags == "latency:pass;threshold:FAIL(s>s_t)"
    assert BoundCheck(1, 2.0, 1.0, False).flags == "latency:FAIL"
    assert beyond.to_dict()["guarantee_applies"] is False


def test_check_record_on_scripted_run():
    cfg = SimulationConfig(seed=1, m=60, mu=0.2, horizon=40, warmup=5)
    topo = build_topology(cfg)
    rec = run(cfg, scripted_schedule([(0, 0, None), (1, 0, None)], cfg.horizon, range(topo.l)), topo)
    check = check_record(rec, d_th=0.5)
    assert check.failed == 2
    assert check.mean_delay == pytest.approx(rec.mean_delay_ms / 1e3)
    assert check.latency_ok


def test_spearman():
    assert spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


def test_tiny_threshold_tolerates_nothing():
    assert max_extra_aps(PARAMS, 0.001) < 0
    assert tolerance_bound(PARAMS, 0.001, 300, 90) == 0


def test_omega_bound_limits():
    assert omega_lower_bound(1.0, 1.5) == pytest.approx(1.5)
    assert predicted_ratio(0.4, 1.0, 1.25) == pytest.approx(1 / 1.25)


@pytest.mark.parametrize("seed", range(5))
def test_six_ap_two_server_ratio_range(seed):
    topo = generate_topology(seed, 6, n_servers=2)
    eps = ratio_instance(topo, [seed % 2]).estimate.eps_measured
    assert 1.0 - 1e-9 <= eps <= 3.0
