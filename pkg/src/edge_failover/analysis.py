"""Theoretical quantities checked against simulation: ratio, cost scaling, bounds."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import fodt
from .allocation import (
    AllocationStrategy,
    StrategyCache,
    baseline_strategy,
    brute_force_optimal,
    per_ap_delays,
    strategy_from_tree,
)
from .delay_model import CLOUD, CloudLink, QueueState, RoutingMatrices, slot_delays
from .topology import NetworkTopology


class AnalysisError(ValueError):
    pass


# --- approximation ratio -------------------------------------------------


@dataclass(frozen=True)
class RatioEstimate:
    rho: float
    omega: float
    tau: float
    eps_predicted: float
    eps_measured: float
    mean_coverage: float  # average number of non-host APs per coverage

    @property
    def gap(self) -> float:
        return abs(self.eps_measured - self.eps_predicted)

    @property
    def agreement(self) -> float:
        """Factor separating prediction and measurement (>= 1)."""
        hi = max(self.eps_measured, self.eps_predicted)
        lo = min(self.eps_measured, self.eps_predicted)
        return hi / lo if lo > 0 else math.inf

    def to_dict(self) -> dict:
        return {**asdict(self), "gap": self.gap}


def predicted_ratio(rho: float, omega: float, tau: float) -> float:
    if tau <= 0:
        raise AnalysisError("tau must be positive")
    return (1.0 + rho * (omega - 1.0)) / tau


def approximation_ratio(
    fodt_delay: float,
    oracle_delay: float,
    omega: float,
    tau: float,
    rho: float,
    m: int | None = None,
    l: int | None = None,
) -> RatioEstimate:
    if oracle_delay <= 0:
        raise AnalysisError("oracle delay must be positive")
    mean_cov = (m - l) / l if m is not None and l else math.nan
    return RatioEstimate(
        rho=rho,
        omega=omega,
        tau=tau,
        eps_predicted=predicted_ratio(rho, omega, tau),
        eps_measured=fodt_delay / oracle_delay,
        mean_coverage=mean_cov,
    )


def omega_lower_bound(rho: float, tau: float) -> float:
    """Smallest delay multiplier of the affected APs compatible with a ratio above 1."""
    if rho <= 0:
        raise AnalysisError("rho must be positive")
    if tau <= 0:
        raise AnalysisError("tau must be positive")
    return 1.0 + (tau - 1.0) / rho


@dataclass(frozen=True)
class RatioInstance:
    """Paired evaluation of one failure pattern."""

    failed: tuple[int, ...]
    affected: tuple[int, ...]
    pre_delay: float
    fodt_delay: float
    oracle_delay: float
    recompute_delay: float
    omega: float
    tau: float
    cloud_aps: int
    estimate: RatioEstimate


def ratio_instance(
    topology: NetworkTopology,
    failed: Iterable[int],
    cloud: CloudLink = CloudLink(),
    slot: float = 1.0,
    queues: QueueState | None = None,
) -> RatioInstance:
    """FODT against the exhaustive optimum and a full recompute on one instance.

    FODT handles the failures one by one in id order, each time with the
    delays of the pre-failure network as its known delays. omega compares
    the delay added to the network, expressed per direct-affected AP, with
    the pre-failure delay of the APs in the absorbing coverages. tau is the
    full recompute's mean delay over the pre-failure mean.
    """
    failed = tuple(sorted(set(failed)))
    queues = queues if queues is not None else QueueState.empty(topology)
    pre = baseline_strategy(topology)
    pre_d = per_ap_delays(pre, topology, queues, cloud, slot)
    view = slot_delays(RoutingMatrices.from_strategy(pre, topology), topology, queues, cloud, slot)

    strategy: AllocationStrategy = pre
    down: set[int] = set()
    for s in failed:
        down.add(s)
        strategy, _, _ = fodt.on_failure(s, topology, strategy, view, down, StrategyCache())
    fodt_d = per_ap_delays(strategy, topology, queues, cloud, slot)

    _, oracle_total = brute_force_optimal(topology, queues, failed, slot)
    recompute = strategy_from_tree(topology, [s.id for s in topology.servers if s.id not in down])
    recompute_d = per_ap_delays(recompute, topology, queues, cloud, slot)

    home = topology.home_server
    affected = tuple(ap for ap in range(topology.m) if home[ap] in down)
    h = len(affected)
    absorbing = {strategy.server_of(ap) for ap in affected} - {CLOUD}
    absorbing_aps = [ap for ap in range(topology.m) if home[ap] in absorbing]
    reference = float(pre_d[absorbing_aps].mean()) if absorbing_aps else float(pre_d.mean())
    others = [ap for ap in range(topology.m) if home[ap] not in down]
    added = float(fodt_d[list(affected)].sum() + (fodt_d[others] - pre_d[others]).sum())
    omega = added / (h * reference) if h and reference > 0 else 1.0
    tau = float(recompute_d.mean() / pre_d.mean())
    rho = h / topology.m
    estimate = approximation_ratio(
        float(fodt_d.sum()), oracle_total, omega, tau, rho, topology.m, topology.l
    )
    return RatioInstance(
        failed=failed,
        affected=affected,
        pre_delay=float(pre_d.sum()),
        fodt_delay=float(fodt_d.sum()),
        oracle_delay=oracle_total,
        recompute_delay=float(recompute_d.sum()),
        omega=omega,
        tau=tau,
        cloud_aps=len(strategy.cloud_aps),
        estimate=estimate,
    )


# --- complexity ----------------------------------------------------------


@dataclass(frozen=True)
class ComplexityReport:
    sizes: tuple[int, ...]
    mean_counts: tuple[float, ...]
    exponent: float
    intercept: float
    r_squared: float

    def within(self, target: float, tolerance: float) -> bool:
        return abs(self.exponent - target) <= tolerance

    def to_dict(self) -> dict:
        return asdict(self)


def complexity_check(traces: Iterable[tuple[int, float]]) -> ComplexityReport:
    """Fit log(count) = a + b log(M) over (M, recomputation count) pairs."""
    by_size: dict[int, list[float]] = {}
    for m, count in traces:
        by_size.setdefault(int(m), []).append(float(count))
    if len(by_size) < 3:
        raise AnalysisError(f"need at least 3 network sizes, got {len(by_size)}")
    sizes = sorted(by_size)
    means = [float(np.mean(by_size[m])) for m in sizes]
    if min(means) <= 0:
        raise AnalysisError("counts must be positive to fit a power law")
    x, y = np.log(sizes), np.log(means)
    slope, intercept = np.polyfit(x, y, 1)
    fitted = intercept + slope * x
    ss_res = float(((y - fitted) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return ComplexityReport(tuple(sizes), tuple(means), float(slope), float(intercept), r2)


# --- robustness bounds ---------------------------------------------------


@dataclass(frozen=True)
class RobustnessParams:
    """Capacity and queue extremes that feed the tolerance and latency bounds.

    ``task_min_mean`` is the smallest mean task size over APs and
    ``task_max`` the largest task size; queue contents and task sizes share
    one unit per slot.
    """

    f_bs_min: float
    f_bs_max: float
    f_es_min: float
    f_es_max: float
    queue_min: float = 0.0
    queue_max: float = 0.0
    task_min_mean: float = 1.0
    task_max: float = 1.0
    hops_max: int = 1

    def __post_init__(self) -> None:
        if min(self.f_bs_min, self.f_bs_max, self.f_es_min, self.f_es_max) <= 0:
            raise AnalysisError("capacities must be positive")
        if self.task_min_mean <= 0 or self.task_max <= 0:
            raise AnalysisError("task sizes must be positive")

    @property
    def eps_large(self) -> float:
        return self.f_es_max / self.f_bs_max

    @property
    def eps_small(self) -> float:
        return self.f_es_min / self.f_bs_min

    @property
    def nu(self) -> float:
        return self.f_bs_max / self.f_bs_min

    @property
    def capacity_min(self) -> float:
        return min(self.f_bs_min, self.f_es_min)

    @classmethod
    def from_record(cls, record) -> RobustnessParams:
        """Run-true extremes of a :class:`MetricsRecord`."""
        cap, ex = record.capacities, record.extremes
        return cls(
            f_bs_min=cap["f_bs_min"],
            f_bs_max=cap["f_bs_max"],
            f_es_min=cap["f_es_min"],
            f_es_max=cap["f_es_max"],
            queue_min=0.0 if math.isinf(ex.content_min) else ex.content_min,
            queue_max=ex.content_max,
            task_min_mean=cap["task_min"],
            task_max=cap["task_max"],
            hops_max=ex.hops_max,
        )


def max_extra_aps(params: RobustnessParams, d_th: float) -> float:
    """Largest mean number of extra APs per surviving server under the threshold."""
    if d_th <= 0:
        raise AnalysisError("latency threshold must be positive")
    gain = params.eps_large * params.nu**2 * params.f_bs_min * d_th
    return (gain - params.queue_min) / params.task_min_mean


def tolerance_from_extra(n_extra: float, m: int, l: int) -> int:
    """Failures that spread ``n_extra`` APs onto every surviving server."""
    if n_extra <= 0:
        return 0
    s_t = math.floor(n_extra * l * l / (m + n_extra * l) + 1e-9)
    return max(0, min(l - 1, s_t))


def tolerance_bound(params: RobustnessParams, d_th: float, m: int, l: int) -> int:
    return tolerance_from_extra(max_extra_aps(params, d_th), m, l)


def extra_aps(s_failed: int, m: int, l: int) -> float:
    if not 0 <= s_failed < l:
        raise AnalysisError(f"need 0 <= failed < {l}, got {s_failed}")
    return m / (l - s_failed) - m / l


def latency_bound(s_failed: int, m: int, l: int, params: RobustnessParams) -> float:
    """Guaranteed mean delay with ``s_failed`` servers down."""
    n_extra = extra_aps(s_failed, m, l)
    return (1.0 + params.hops_max) * (params.queue_max + n_extra * params.task_max) / params.capacity_min


@dataclass(frozen=True)
class BoundCheck:
    failed: int
    mean_delay: float
    latency_bound: float
    latency_ok: bool
    d_th: float | None = None
    tolerance: int | None = None
    threshold_ok: bool | None = None

    @property
    def guarantee_applies(self) -> bool:
        return self.tolerance is not None and self.failed <= self.tolerance

    @property
    def guarantee_broken(self) -> bool:
        """Delay above the threshold although the failure count is tolerated."""
        return self.guarantee_applies and self.threshold_ok is False

    @property
    def ok(self) -> bool:
        return self.latency_ok and not self.guarantee_broken

    def to_dict(self) -> dict:
        return {**asdict(self), "guarantee_applies": self.guarantee_applies, "ok": self.ok}

    @property
    def flags(self) -> str:
        out = ["latency:" + ("pass" if self.latency_ok else "FAIL")]
        if self.threshold_ok is not None:
            state = "pass" if self.threshold_ok else "FAIL"
            scope = "" if self.guarantee_applies else "(s>s_t)"
            out.append(f"threshold:{state}{scope}")
        return ";".join(out)


def check_record(record, d_th: float | None = None) -> BoundCheck:
    """Latency bound (and optionally the threshold guarantee) for one run.

    The failure count is the largest number of servers down at once after
    warm-up; delays are compared in seconds. A delay above ``d_th`` only
    breaks the guarantee when the failure count is within the tolerance.
    """
    cfg = record.config
    params = RobustnessParams.from_record(record)
    n_servers = record.capacities["n_servers"]
    s = min(record.extremes.failed_max, n_servers - 1)
    mean_s = record.mean_delay_ms / 1e3
    bound = latency_bound(s, cfg["m"], n_servers, params)
    latency_ok = bool(mean_s <= bound + 1e-12)
    if d_th is None:
        return BoundCheck(s, mean_s, bound, latency_ok)
    s_t = tolerance_bound(params, d_th, cfg["m"], n_servers)
    return BoundCheck(s, mean_s, bound, latency_ok, d_th, s_t, bool(mean_s <= d_th))


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(x, y).statistic)
