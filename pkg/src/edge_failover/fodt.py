"""Failure recovery by routing reversal and cached-strategy restoration.

When a server fails, each AP that was assigned to it either moves to an
operational server it links directly, or sends its tasks back along its
coverage's routing tree to an edge AP, which hands them to the
neighbouring AP with the smallest known delay. That neighbour's existing
route carries them on. When the server comes back the cached pre-failure
routes of its coverage are put back as they were.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .allocation import AllocationError, AllocationStrategy, Cost, Route, StrategyCache, cloud_route
from .delay_model import CLOUD, DelayView
from .topology import Coverage, NetworkTopology, edge_aps


class RecoveryError(AllocationError):
    pass


@dataclass(frozen=True)
class PlanEntry:
    ap: int
    kind: str  # "direct", "reversed" or "cloud"
    server: int
    route: tuple[int, ...]
    reversed_path: tuple[int, ...] = ()
    accessing_ap: int | None = None


@dataclass(frozen=True)
class RecoveryPlan:
    failed_server: int
    entries: tuple[PlanEntry, ...]

    @property
    def cloud_aps(self) -> list[int]:
        return [e.ap for e in self.entries if e.kind == "cloud"]

    def to_dict(self) -> dict:
        return {"failed_server": self.failed_server, "entries": [asdict(e) for e in self.entries]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> RecoveryPlan:
        entries = tuple(
            PlanEntry(
                ap=e["ap"],
                kind=e["kind"],
                server=e["server"],
                route=tuple(e["route"]),
                reversed_path=tuple(e["reversed_path"]),
                accessing_ap=e["accessing_ap"],
            )
            for e in doc["entries"]
        )
        return cls(doc["failed_server"], entries)


def tree_path(coverage: Coverage, a: int, b: int) -> tuple[int, ...]:
    """Path from ``a`` to ``b`` inside the coverage's routing tree."""
    up_a = coverage.path_to_root(a)
    up_b = coverage.path_to_root(b)
    pos_b = {ap: k for k, ap in enumerate(up_b)}
    for k, ap in enumerate(up_a):
        if ap in pos_b:
            return up_a[: k + 1] + tuple(reversed(up_b[: pos_b[ap]]))
    raise RecoveryError(f"APs {a} and {b} are not in one routing tree")


def reverse_route(
    ap: int, coverage: Coverage, topology: NetworkTopology, target: int | None = None
) -> list[int]:
    """Tree path from ``ap`` to an edge AP of its coverage.

    Without ``target`` the nearest edge AP is used (fewest tree hops, then
    lowest id).
    """
    if ap not in coverage.members:
        raise RecoveryError(f"AP {ap} is not in the coverage of server {coverage.server}")
    edges = edge_aps(coverage, topology)
    if target is not None:
        if target not in edges:
            raise RecoveryError(f"AP {target} is not an edge AP of server {coverage.server}")
        return list(tree_path(coverage, ap, target))
    if not edges:
        raise RecoveryError(f"coverage of server {coverage.server} has no edge AP")
    return list(min((tree_path(coverage, ap, e) for e in sorted(edges)), key=len))


def _serves_own_coverage(ap: int, topology: NetworkTopology, strategy: AllocationStrategy, failed: set[int]) -> bool:
    home = topology.home_server[ap]
    return home not in failed and strategy.server_of(ap) == home


def accessing_candidates(
    edge_ap: int, topology: NetworkTopology, strategy: AllocationStrategy, failed: Iterable[int] = ()
) -> list[int]:
    """External neighbours of ``edge_ap`` served in their own, operational coverage."""
    failed = set(failed)
    own = topology.home_server[edge_ap]
    return [
        a
        for a in topology.neighbors[edge_ap]
        if topology.home_server[a] != own and _serves_own_coverage(a, topology, strategy, failed)
    ]


def select_accessing_ap(
    edge_ap: int,
    topology: NetworkTopology,
    strategy: AllocationStrategy,
    delays: DelayView,
    failed: Iterable[int] = (),
) -> tuple[int, int]:
    """Neighbour with the smallest known end-to-end delay, and its server."""
    candidates = accessing_candidates(edge_ap, topology, strategy, failed)
    if not candidates:
        raise RecoveryError(f"edge AP {edge_ap} has no neighbour in an operational coverage")
    best = min(candidates, key=lambda a: (delays.e2e[a], a))
    return best, strategy.server_of(best)


def _direct_servers(ap: int, topology: NetworkTopology, failed: set[int]) -> list[int]:
    server_at = topology.server_at
    return [server_at[v] for v in topology.neighbors[ap] if v in server_at and server_at[v] not in failed]


class _Committed:
    """Load already routed by earlier APs of the same recovery pass.

    Known delays come from the previous slot; each candidate route is
    charged the extra data and workload it would carry, this AP's own
    included.
    """

    def __init__(self, topology: NetworkTopology, delays: DelayView, enabled: bool):
        self.enabled = enabled
        self.ap_scale = delays.slot / topology.f_bs
        self.srv_scale = delays.slot / topology.f_es
        self.extra_ap = np.zeros(topology.m)
        self.extra_srv = np.zeros(topology.l)
        self.data = topology.data_rate
        self.work = topology.work_rate

    def route_extra(self, ap: int, transmitters: Iterable[int], server: int) -> float:
        if not self.enabled:
            return 0.0
        d, w = self.data[ap], self.work[ap]
        extra = sum((self.extra_ap[k] + d) * self.ap_scale[k] for k in transmitters)
        return float(extra + (self.extra_srv[server] + w) * self.srv_scale[server])

    def commit(self, ap: int, route: tuple[int, ...], server: int) -> None:
        if server == CLOUD:
            return
        for k in route[:-1]:
            self.extra_ap[k] += self.data[ap]
        self.extra_srv[server] += self.work[ap]


def _plan_ap(
    ap: int,
    topology: NetworkTopology,
    strategy: AllocationStrategy,
    delays: DelayView,
    failed: set[int],
    committed: _Committed,
) -> tuple[PlanEntry, int]:
    """Recovery route of one affected AP and the number of candidates it weighed."""
    d_ap, d_srv = delays.ap, delays.server
    host_of = topology.host_of
    direct = _direct_servers(ap, topology, failed)
    if direct:
        server = min(direct, key=lambda l: (d_ap[ap] + d_srv[l] + committed.route_extra(ap, (ap,), l), l))
        return PlanEntry(ap, "direct", server, (ap, host_of[server])), len(direct)

    coverage = topology.coverage_by_server[topology.home_server[ap]]
    evaluations = 0
    best = None
    for e in sorted(edge_aps(coverage, topology)):
        path = tree_path(coverage, ap, e)
        base = float(sum(d_ap[k] for k in path))
        targets = _direct_servers(e, topology, failed)
        if targets:
            evaluations += len(targets)
            for l in targets:
                cost = base + d_srv[l] + committed.route_extra(ap, path, l)
                key = (cost, len(path), e, l)
                if best is None or key < best[0]:
                    best = (key, PlanEntry(ap, "reversed", l, path + (host_of[l],), path))
            continue
        candidates = accessing_candidates(e, topology, strategy, failed)
        evaluations += len(candidates)
        for a in candidates:
            (onward,) = strategy.routes[a]
            cost = base + delays.e2e[a] + committed.route_extra(ap, path + onward.path[:-1], onward.server)
            key = (cost, len(path), e, a)
            if best is None or key < best[0]:
                best = (key, PlanEntry(ap, "reversed", onward.server, path + onward.path, path, a))
    if best is None:
        return PlanEntry(ap, "cloud", CLOUD, (ap,)), evaluations
    return best[1], evaluations


def on_failure(
    failed: int,
    topology: NetworkTopology,
    strategy: AllocationStrategy,
    delays: DelayView,
    failed_servers: Iterable[int] = (),
    cache: StrategyCache | None = None,
    epoch: str | None = None,
    load_aware: bool = True,
) -> tuple[AllocationStrategy, RecoveryPlan, Cost]:
    """Re-plan every AP currently assigned to ``failed``.

    ``failed_servers`` lists the other servers already down. ``delays`` is
    the delay information of the previous slot. APs are planned one after
    another in id order; with ``load_aware`` each sees the load committed
    by the APs planned before it.
    """
    down = set(failed_servers) | {failed}
    affected = sorted(strategy.members_of(failed))
    if cache is not None and failed in topology.coverage_by_server:
        cache.capture(strategy, topology.coverage_by_server[failed])
    entries = []
    changes: dict[int, tuple[Route, ...]] = {}
    evaluations = 0
    committed = _Committed(topology, delays, load_aware)
    for ap in affected:
        entry, n = _plan_ap(ap, topology, strategy, delays, down, committed)
        committed.commit(ap, entry.route, entry.server)
        evaluations += n
        entries.append(entry)
        if entry.kind == "cloud":
            changes[ap] = (cloud_route(ap),)
        else:
            changes[ap] = (Route(entry.route, entry.server, 1.0),)
    new = strategy.updated(changes, epoch)
    return new, RecoveryPlan(failed, tuple(entries)), Cost(evaluations, len(changes))


def on_repair(
    repaired: int,
    topology: NetworkTopology,
    strategy: AllocationStrategy,
    cache: StrategyCache,
    epoch: str | None = None,
) -> tuple[AllocationStrategy, Cost]:
    """Put the cached pre-failure routes of the repaired server's coverage back."""
    fragment = cache.pop(repaired)
    return strategy.updated(fragment.routes, epoch), Cost(0, len(fragment.routes))
