"""Slotted simulation: failures, policy reactions, queue dynamics and metrics."""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .allocation import AllocationError, AllocationStrategy, Cost, baseline_strategy, validate_strategy
from .delay_model import CloudLink, DelayView, QueueState, RoutingMatrices, slot_delays
from .failure_injection import FailureSchedule, sample_schedule
from .recovery_benchmarks import POLICIES, RecoveryPolicy, make_policy
from .topology import (
    F_BS_RANGE,
    F_ES_RANGE,
    TASK_RATE_RANGE,
    TASK_SIZE_RANGE,
    TASK_WORK_RANGE,
    NetworkTopology,
    generate_topology,
)

WORKERS_ENV = "EDGE_FAILOVER_WORKERS"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimulationConfig:
    seed: int = 0
    m: int = 300
    mu: float | None = 0.3
    # fixes the server count instead of deriving it from mu
    n_servers: int | None = None
    rho: float = 0.3
    horizon: int = 400
    warmup: int = 50
    policy: str = "fodt"
    depth_limit: int = 3
    slot: float = 1.0
    users_per_ap: tuple[int, int] = (1, 1)
    task_rate_range: tuple[float, float] = TASK_RATE_RANGE
    task_work_range: tuple[float, float] = TASK_WORK_RANGE
    task_size_range: tuple[float, float] = TASK_SIZE_RANGE
    f_bs_range: tuple[float, float] = F_BS_RANGE
    f_es_range: tuple[float, float] = F_ES_RANGE
    repair_range: tuple[int, int] = (5, 50)
    cloud_latency: float = 0.1
    backhaul_rate: float = 100.0
    validate: bool = False

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ConfigError("horizon must be at least 1")
        if not 0 <= self.warmup < self.horizon:
            raise ConfigError("warmup must be in [0, horizon)")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must be in [0, 1], got {self.rho}")
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; choose from {sorted(POLICIES)}")
        if self.mu is None and self.n_servers is None:
            raise ConfigError("give mu or n_servers")
        if self.slot <= 0 or self.cloud_latency < 0 or self.backhaul_rate <= 0:
            raise ConfigError("slot and backhaul rate must be positive, cloud latency nonnegative")
        for name in ("task_rate_range", "task_work_range", "task_size_range", "f_bs_range", "f_es_range", "repair_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} must be a nonempty positive interval, got ({lo}, {hi})")
        lo, hi = self.users_per_ap
        if not 0 <= lo <= hi:
            raise ConfigError(f"users_per_ap must satisfy 0 <= low <= high, got {self.users_per_ap}")

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> SimulationConfig:
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **changes) -> SimulationConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @property
    def cloud(self) -> CloudLink:
        return CloudLink(self.cloud_latency, self.backhaul_rate)


@lru_cache(maxsize=64)
def _cached_topology(key: tuple) -> NetworkTopology:
    (seed, m, mu, n_servers, depth_limit, users, rate, work, size, f_bs, f_es) = key
    return generate_topology(
        seed,
        m,
        mu,
        depth_limit,
        n_servers=n_servers,
        users_per_ap=users,
        task_rate_range=rate,
        task_work_range=work,
        task_size_range=size,
        f_bs_range=f_bs,
        f_es_range=f_es,
    )


def build_topology(config: SimulationConfig) -> NetworkTopology:
    return _cached_topology(
        (
            config.seed,
            config.m,
            None if config.n_servers is not None else config.mu,
            config.n_servers,
            config.depth_limit,
            config.users_per_ap,
            config.task_rate_range,
            config.task_work_range,
            config.task_size_range,
            config.f_bs_range,
            config.f_es_range,
        )
    )


def build_schedule(config: SimulationConfig, topology: NetworkTopology) -> FailureSchedule:
    # one stream per seed, shared by every rho and policy so runs are paired
    seed = int(np.random.SeedSequence([config.seed, 2]).generate_state(1)[0])
    return sample_schedule(seed, range(topology.l), config.rho, config.horizon, config.repair_range)


@dataclass(frozen=True)
class EventRecord:
    slot: int
    server: int
    kind: str
    evaluations: int
    writes: int
    wall_ms: float

    @property
    def count(self) -> int:
        return self.evaluations + self.writes


@dataclass
class Extremes:
    """Run-true extremes after warm-up, the inputs of the latency bounds."""

    content_max: float = 0.0
    content_min: float = math.inf
    hops_max: int = 0
    cloud_aps_max: int = 0
    failed_max: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class MetricsRecord:
    config: dict
    delays_ms: list[float]
    events: list[EventRecord] = field(default_factory=list)
    extremes: Extremes = field(default_factory=Extremes)
    conservation_error: float = 0.0
    invalid_strategies: int = 0
    failed_fraction: float = 0.0
    cloud_fraction: float = 0.0
    capacities: dict = field(default_factory=dict)

    @property
    def mean_delay_ms(self) -> float:
        steady = self.delays_ms[self.config["warmup"] :]
        return float(np.mean(steady)) if steady else math.nan

    @property
    def failures(self) -> int:
        return sum(e.kind == "fail" for e in self.events)

    @property
    def convergence_count(self) -> float:
        """Mean recomputation count per failure and its repair."""
        n = self.failures
        return sum(e.count for e in self.events) / n if n else 0.0

    @property
    def convergence_ms(self) -> float:
        n = self.failures
        return sum(e.wall_ms for e in self.events) / n if n else 0.0

    def summary(self) -> dict:
        return {
            "policy": self.config["policy"],
            "rho": self.config["rho"],
            "mu": self.config["mu"],
            "m": self.config["m"],
            "n_servers": self.capacities.get("n_servers"),
            "seed": self.config["seed"],
            "mean_delay_ms": self.mean_delay_ms,
            "convergence_count": self.convergence_count,
            "convergence_ms": self.convergence_ms,
            "failures": self.failures,
            "failed_fraction": self.failed_fraction,
            "cloud_fraction": self.cloud_fraction,
            "conservation_error": self.conservation_error,
            "invalid_strategies": self.invalid_strategies,
        }

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "delays_ms": self.delays_ms,
            "events": [dataclasses.asdict(e) for e in self.events],
            "extremes": self.extremes.to_dict(),
            "conservation_error": self.conservation_error,
            "invalid_strategies": self.invalid_strategies,
            "failed_fraction": self.failed_fraction,
            "cloud_fraction": self.cloud_fraction,
            "capacities": self.capacities,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> MetricsRecord:
        return cls(
            config=doc["config"],
            delays_ms=list(doc["delays_ms"]),
            events=[EventRecord(**e) for e in doc["events"]],
            extremes=Extremes(**doc["extremes"]),
            conservation_error=doc["conservation_error"],
            invalid_strategies=doc["invalid_strategies"],
            failed_fraction=doc["failed_fraction"],
            cloud_fraction=doc["cloud_fraction"],
            capacities=doc["capacities"],
        )


class Simulation:
    """One run's mutable state. Strictly sequential."""

    def __init__(
        self,
        topology: NetworkTopology,
        policy: RecoveryPolicy,
        *,
        slot: float = 1.0,
        cloud: CloudLink = CloudLink(),
        warmup: int = 0,
        validate: bool = False,
    ):
        self.topology = topology
        self.policy = policy
        self.slot = slot
        self.cloud = cloud
        self.warmup = warmup
        self.validate = validate
        self.strategy: AllocationStrategy = baseline_strategy(topology)
        self.mats = RoutingMatrices.from_strategy(self.strategy, topology)
        self.queues = QueueState.empty(topology)
        self.failed: frozenset[int] = frozenset()
        self.view: DelayView = slot_delays(self.mats, topology, self.queues, cloud, slot)
        self.z = 0
        self.events: list[EventRecord] = []
        self.delays_ms: list[float] = []
        self.extremes = Extremes()
        self.conservation_error = 0.0
        self.invalid = 0
        self._failed_slots = 0
        self._cloud_slots = 0
        self._epoch = 0
        self._up = np.ones(topology.l, dtype=bool)
        self._task_size = np.maximum(topology.data_rate, topology.work_rate) * slot

    def apply_event(self, server: int, kind: str) -> EventRecord:
        self._epoch += 1
        start = time.perf_counter()
        if kind == "fail":
            if server in self.failed:
                raise AllocationError(f"server {server} failed twice")
            self.failed = self.failed | {server}
            outcome = self.policy.on_failure(
                server, self.strategy, self.view, self.failed, f"post-failure-{self._epoch}"
            )
        else:
            if server not in self.failed:
                raise AllocationError(f"server {server} repaired while up")
            self.failed = self.failed - {server}
            outcome = self.policy.on_repair(
                server, self.strategy, self.view, self.failed, f"post-repair-{self._epoch}"
            )
        wall_ms = (time.perf_counter() - start) * 1e3
        self.strategy = outcome.strategy
        self._up[server] = kind != "fail"
        record = EventRecord(self.z, server, kind, outcome.cost.evaluations, outcome.cost.writes, wall_ms)
        self.events.append(record)
        return record

    def step(self) -> float:
        """Advance one slot; returns the mean end-to-end delay in ms."""
        topo, t = self.topology, self.slot
        changed = self.mats.update(self.strategy)
        if self.validate and changed and not validate_strategy(self.strategy, topo, self.failed).ok:
            self.invalid += 1
        arr_ap, arr_srv, arr_cloud = self.mats.arrivals(topo)
        if np.any(arr_srv[~self._up] > 1e-12):
            raise AllocationError("load routed to a failed server")

        content_ap = self.queues.ap + arr_ap * t
        content_srv = self.queues.server + arr_srv * t
        content_cloud = self.queues.cloud + arr_cloud * t
        d_ap = content_ap / topo.f_bs
        d_srv = content_srv / topo.f_es
        d_cloud = self.cloud.delay(content_cloud)
        e2e = self.mats.relay @ d_ap + self.mats.to_server @ d_srv + self.mats.to_cloud * d_cloud
        self.view = DelayView(d_ap, d_srv, d_cloud, e2e, t)

        served = np.where(self._up, np.minimum(content_srv, topo.f_es * t), 0.0)
        new_server = content_srv - served
        admitted = float(topo.work_rate.sum()) * t
        cloud_work = float(self.mats.to_cloud @ topo.work_rate) * t
        delivered = float(served.sum() + (new_server - self.queues.server).sum())
        self.conservation_error = max(self.conservation_error, abs(admitted - delivered - cloud_work))

        self.queues = QueueState(
            np.maximum(0.0, content_ap - topo.f_bs * t),
            new_server,
            max(0.0, content_cloud - self.cloud.backhaul_rate * t),
        )
        mean_ms = float(e2e.mean()) * 1e3
        self.delays_ms.append(mean_ms)
        if self.z >= self.warmup:
            ex = self.extremes
            up_content = content_srv[self._up]
            ex.content_max = max(ex.content_max, float(content_ap.max()), float(up_content.max(initial=0.0)))
            ex.content_min = min(ex.content_min, float(content_ap.min()), float(up_content.min(initial=math.inf)))
            ex.hops_max = max(ex.hops_max, int(self.mats.hops.max()))
            n_cloud = int(np.count_nonzero(self.mats.to_cloud))
            ex.cloud_aps_max = max(ex.cloud_aps_max, n_cloud)
            ex.failed_max = max(ex.failed_max, len(self.failed))
            self._failed_slots += len(self.failed)
            self._cloud_slots += n_cloud
        self.z += 1
        return mean_ms

    def run(self, schedule: FailureSchedule, horizon: int) -> None:
        by_slot = schedule.by_slot()
        for _ in range(horizon):
            for event in by_slot.get(self.z, ()):
                self.apply_event(event.server, event.kind)
            self.step()

    def record(self, config: dict) -> MetricsRecord:
        topo = self.topology
        steady = max(1, self.z - self.warmup)
        return MetricsRecord(
            config=config,
            delays_ms=self.delays_ms,
            events=self.events,
            extremes=self.extremes,
            conservation_error=self.conservation_error,
            invalid_strategies=self.invalid,
            failed_fraction=self._failed_slots / (steady * topo.l),
            cloud_fraction=self._cloud_slots / (steady * topo.m),
            capacities={
                "n_servers": topo.l,
                "f_bs_min": float(topo.f_bs.min()),
                "f_bs_max": float(topo.f_bs.max()),
                "f_es_min": float(topo.f_es.min()),
                "f_es_max": float(topo.f_es.max()),
                "task_max": float(self._task_size.max()),
                "task_min": float(self._task_size.min()),
            },
        )


def run(
    config: SimulationConfig,
    schedule: FailureSchedule | None = None,
    topology: NetworkTopology | None = None,
) -> MetricsRecord:
    """Simulate ``config.horizon`` slots; deterministic per config."""
    topology = topology if topology is not None else build_topology(config)
    schedule = schedule if schedule is not None else build_schedule(config, topology)
    sim = Simulation(
        topology,
        make_policy(config.policy, topology),
        slot=config.slot,
        cloud=config.cloud,
        warmup=config.warmup,
        validate=config.validate,
    )
    sim.run(schedule, config.horizon)
    return sim.record(config.to_dict())


@dataclass(frozen=True)
class CycleCost:
    """Cost of one failure followed by the repair of the same server."""

    server: int
    failure: Cost
    repair: Cost
    wall_ms: float

    @property
    def count(self) -> int:
        return self.failure.count + self.repair.count


def measure_convergence(
    config: SimulationConfig, server: int | None = None, topology: NetworkTopology | None = None
) -> CycleCost:
    """Fail one server on the steady failure-free network, then repair it."""
    topology = topology if topology is not None else build_topology(config)
    if server is None:
        server = int(np.random.default_rng([config.seed, 3]).integers(topology.l))
    if not 0 <= server < topology.l:
        raise ConfigError(f"unknown server {server}")
    sim = Simulation(
        topology, make_policy(config.policy, topology), slot=config.slot, cloud=config.cloud
    )
    sim.step()
    fail = sim.apply_event(server, "fail")
    sim.step()
    repair = sim.apply_event(server, "repair")
    return CycleCost(
        server,
        Cost(fail.evaluations, fail.writes),
        Cost(repair.evaluations, repair.writes),
        fail.wall_ms + repair.wall_ms,
    )


def worker_count(default: int = 1) -> int:
    value = os.environ.get(WORKERS_ENV)
    if not value:
        return default
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be at least 1")
    return n


def sweep(
    base: SimulationConfig,
    rhos: Sequence[float],
    mus: Sequence[float | None],
    replications: int,
    policies: Iterable[str] | None = None,
    ms: Sequence[int] | None = None,
    workers: int | None = None,
) -> list[MetricsRecord]:
    """Cross product of the axes; replication r uses seed ``base.seed + r``."""
    policies = list(policies) if policies is not None else [base.policy]
    ms = list(ms) if ms is not None else [base.m]
    configs = [
        base.replace(rho=rho, mu=mu, m=m, policy=policy, seed=base.seed + r)
        for m in ms
        for mu in mus
        for rho in rhos
        for policy in policies
        for r in range(replications)
    ]
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(configs) <= 1:
        return [run(c) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, configs, chunksize=max(1, len(configs) // (4 * workers))))
