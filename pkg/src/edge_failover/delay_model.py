"""Slotted fluid queues at APs and servers, and the delays they induce.

Queues follow the Lindley form of the AP/server backlog recursions,
``Q' = max(0, Q + (arrivals - service) * t)``. Delay functions take an
optional ``arrivals`` term: with it they return the sojourn of the work
present during a slot, ``(Q + A * t) / f``; without it, the delay of the
stored backlog alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .topology import NetworkTopology

if TYPE_CHECKING:
    from .allocation import AllocationStrategy

CLOUD = -1


class DelayModelError(ValueError):
    pass


@dataclass(frozen=True)
class ApQueueState:
    ap: int
    backlog: float = 0.0
    slot: int = 0


@dataclass(frozen=True)
class ServerQueueState:
    server: int
    backlog: float = 0.0
    slot: int = 0


@dataclass(frozen=True)
class OfferedLoad:
    """Per-AP offered rates.

    ``local`` is the part of the users' traffic the AP never transmits
    itself: it hosts the serving edge server, or it ships the traffic to
    the cloud over the backhaul.
    """

    from_users: float = 0.0
    from_neighbors: float = 0.0
    local: float = 0.0

    @property
    def transmitted(self) -> float:
        return self.from_users - self.local + self.from_neighbors


@dataclass(frozen=True)
class CloudLink:
    """Remote cloud reached through one shared backhaul queue."""

    latency: float = 0.1
    backhaul_rate: float = 100.0

    def delay(self, content: float) -> float:
        return self.latency + content / self.backhaul_rate


def _check_rate(name: str, value: float) -> None:
    if not value > 0:
        raise DelayModelError(f"{name} must be positive, got {value}")


def ap_offered_load(ap: int, strategy: AllocationStrategy, topology: NetworkTopology) -> OfferedLoad:
    if not 0 <= ap < topology.m:
        raise DelayModelError(f"unknown AP {ap}")
    users = topology.aps[ap].data_rate
    own = strategy.routes.get(ap, ())
    local = sum(r.share for r in own if len(r.path) == 1) * users
    relayed = 0.0
    for i, routes in strategy.routes.items():
        if i == ap:
            continue
        for r in routes:
            if ap in r.path[1:-1]:
                relayed += topology.aps[i].data_rate * r.share
    return OfferedLoad(from_users=users, from_neighbors=relayed, local=local)


def ap_queue_update(state: ApQueueState, load: OfferedLoad, f_bs: float, slot: float = 1.0) -> ApQueueState:
    _check_rate("f_bs", f_bs)
    if min(load.from_users, load.from_neighbors, load.local, state.backlog) < 0:
        raise DelayModelError("negative load or backlog")
    backlog = max(0.0, state.backlog + (load.transmitted - f_bs) * slot)
    return ApQueueState(state.ap, backlog, state.slot + 1)


def transmission_delay(state: ApQueueState, f_bs: float, arrivals: float = 0.0, slot: float = 1.0) -> float:
    _check_rate("f_bs", f_bs)
    return (state.backlog + arrivals * slot) / f_bs


def server_offered_load(server: int, strategy: AllocationStrategy, topology: NetworkTopology) -> float:
    if not 0 <= server < topology.l:
        raise DelayModelError(f"unknown server {server}")
    total = 0.0
    for i, routes in strategy.routes.items():
        for r in routes:
            if r.server == server:
                total += topology.aps[i].work_rate * r.share
    return total


def server_queue_update(state: ServerQueueState, t_bs: float, f_es: float, slot: float = 1.0) -> ServerQueueState:
    _check_rate("f_es", f_es)
    if t_bs < 0 or state.backlog < 0:
        raise DelayModelError("negative load or backlog")
    backlog = max(0.0, state.backlog + (t_bs - f_es) * slot)
    return ServerQueueState(state.server, backlog, state.slot + 1)


def processing_delay(state: ServerQueueState, f_es: float, arrivals: float = 0.0, slot: float = 1.0) -> float:
    _check_rate("f_es", f_es)
    return (state.backlog + arrivals * slot) / f_es


@dataclass
class QueueState:
    """Backlogs of every AP, every server and the cloud backhaul."""

    ap: np.ndarray
    server: np.ndarray
    cloud: float = 0.0

    @classmethod
    def empty(cls, topology: NetworkTopology) -> QueueState:
        return cls(np.zeros(topology.m), np.zeros(topology.l), 0.0)

    def copy(self) -> QueueState:
        return QueueState(self.ap.copy(), self.server.copy(), self.cloud)


class RoutingMatrices:
    """Dense incidence of a strategy.

    ``relay[i, k]`` is the share of AP i's traffic that AP k transmits,
    ``to_server[i, l]`` the share delivered to server l and ``to_cloud[i]``
    the share sent to the cloud. Rows are rewritten only for APs whose
    routes changed.
    """

    def __init__(self, topology: NetworkTopology):
        self.m = topology.m
        self.relay = np.zeros((topology.m, topology.m))
        self.to_server = np.zeros((topology.m, topology.l))
        self.to_cloud = np.zeros(topology.m)
        self.hops = np.zeros(topology.m, dtype=int)
        self._routes: dict[int, tuple] = {}

    @classmethod
    def from_strategy(cls, strategy: AllocationStrategy, topology: NetworkTopology) -> RoutingMatrices:
        mats = cls(topology)
        mats.update(strategy)
        return mats

    def update(self, strategy: AllocationStrategy) -> list[int]:
        changed = [i for i in range(self.m) if self._routes.get(i) != strategy.routes.get(i)]
        for i in changed:
            routes = strategy.routes.get(i, ())
            self.relay[i] = 0.0
            self.to_server[i] = 0.0
            self.to_cloud[i] = 0.0
            hops = 0
            for r in routes:
                if r.server == CLOUD:
                    self.to_cloud[i] += r.share
                    continue
                for k in r.path[:-1]:
                    self.relay[i, k] += r.share
                self.to_server[i, r.server] += r.share
                hops = max(hops, len(r.path) - 1)
            self.hops[i] = hops
            self._routes[i] = routes
        return changed

    def arrivals(self, topology: NetworkTopology) -> tuple[np.ndarray, np.ndarray, float]:
        """AP data arrivals, server workload arrivals, cloud data arrivals."""
        data = topology.data_rate
        return (
            self.relay.T @ data,
            self.to_server.T @ topology.work_rate,
            float(self.to_cloud @ data),
        )


@dataclass(frozen=True)
class DelayView:
    """Per-element delays of one slot, as seen by the recovery policies."""

    ap: np.ndarray  # transmission delay of each AP
    server: np.ndarray  # processing delay of each server
    cloud: float
    e2e: np.ndarray  # end-to-end delay of each AP
    slot: float = 1.0

    def route_delay(self, path: tuple[int, ...], server: int) -> float:
        if server == CLOUD:
            return self.cloud
        return float(sum(self.ap[k] for k in path[:-1]) + self.server[server])


def slot_delays(
    mats: RoutingMatrices,
    topology: NetworkTopology,
    queues: QueueState,
    cloud: CloudLink = CloudLink(),
    slot: float = 1.0,
    with_arrivals: bool = True,
) -> DelayView:
    """Delays of every element given the backlogs and the strategy's load."""
    if with_arrivals:
        arr_ap, arr_srv, arr_cloud = mats.arrivals(topology)
    else:
        arr_ap, arr_srv, arr_cloud = np.zeros(topology.m), np.zeros(topology.l), 0.0
    d_ap = (queues.ap + arr_ap * slot) / topology.f_bs
    d_srv = (queues.server + arr_srv * slot) / topology.f_es
    d_cloud = cloud.delay(queues.cloud + arr_cloud * slot)
    e2e = mats.relay @ d_ap + mats.to_server @ d_srv + mats.to_cloud * d_cloud
    return DelayView(d_ap, d_srv, d_cloud, e2e, slot)


def end_to_end_delay(
    ap: int,
    server: int,
    strategy: AllocationStrategy,
    topology: NetworkTopology,
    queues: QueueState,
    cloud: CloudLink = CloudLink(),
    slot: float = 1.0,
    with_arrivals: bool = True,
) -> float:
    """Transmission delay summed over the AP's forwarding path plus processing delay."""
    routes = strategy.routes.get(ap)
    if not routes or any(r.server != server for r in routes):
        raise DelayModelError(f"AP {ap} is not assigned to server {server}")
    mats = RoutingMatrices.from_strategy(strategy, topology)
    view = slot_delays(mats, topology, queues, cloud, slot, with_arrivals)
    return float(view.e2e[ap])
