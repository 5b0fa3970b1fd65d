"""Recovery policies behind one interface: FODT and the comparison baselines."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from . import fodt
from .allocation import (
    AllocationError,
    AllocationStrategy,
    Cost,
    Route,
    StrategyCache,
    cloud_route,
    restore_fragment,
    strategy_from_tree,
)
from .delay_model import CLOUD, DelayView
from .topology import NetworkTopology


@dataclass(frozen=True)
class Outcome:
    strategy: AllocationStrategy
    cost: Cost
    plan: fodt.RecoveryPlan | None = None


class RecoveryPolicy:
    """Reacts to server failures and repairs. One instance per simulation run."""

    name = "base"

    def __init__(self, topology: NetworkTopology):
        self.topology = topology

    def on_failure(
        self, server: int, strategy: AllocationStrategy, delays: DelayView, failed: frozenset[int], epoch: str
    ) -> Outcome:
        raise NotImplementedError

    def on_repair(
        self, server: int, strategy: AllocationStrategy, delays: DelayView, failed: frozenset[int], epoch: str
    ) -> Outcome:
        raise NotImplementedError


class FodtPolicy(RecoveryPolicy):
    name = "fodt"

    def __init__(self, topology: NetworkTopology):
        super().__init__(topology)
        self.cache = StrategyCache()

    def on_failure(self, server, strategy, delays, failed, epoch):
        new, plan, cost = fodt.on_failure(server, self.topology, strategy, delays, failed, self.cache, epoch)
        return Outcome(new, cost, plan)

    def on_repair(self, server, strategy, delays, failed, epoch):
        new, cost = fodt.on_repair(server, self.topology, strategy, self.cache, epoch)
        return Outcome(new, cost)


class CloudAssistantPolicy(RecoveryPolicy):
    """Affected APs offload to the remote cloud until their server returns."""

    name = "cloud_assistant"

    def __init__(self, topology: NetworkTopology):
        super().__init__(topology)
        self.cache = StrategyCache()

    def on_failure(self, server, strategy, delays, failed, epoch):
        self.cache.capture(strategy, self.topology.coverage_by_server[server])
        changes = {ap: (cloud_route(ap),) for ap in strategy.members_of(server)}
        return Outcome(strategy.updated(changes, epoch), Cost(0, len(changes)))

    def on_repair(self, server, strategy, delays, failed, epoch):
        n = len(self.cache.get(server).routes)
        new = restore_fragment(self.cache, server, strategy, epoch)
        self.cache.pop(server)
        return Outcome(new, Cost(0, n))


class GreedyPolicy(RecoveryPolicy):
    """Hop-by-hop forwarding to the strongest neighbour until a server is in reach.

    Nothing is cached: on repair the APs displaced by that failure walk
    again with the repaired server available.
    """

    name = "greedy"

    def __init__(self, topology: NetworkTopology, max_hops: int | None = None):
        super().__init__(topology)
        self.max_hops = max_hops if max_hops is not None else topology.m
        self._displaced: dict[int, set[int]] = {}
        self._f_bs = topology.f_bs.tolist()

    def walk(
        self, ap: int, delays: DelayView, failed: frozenset[int], d_ap: list[float] | None = None
    ) -> tuple[Route, int]:
        topo = self.topology
        server_at, host_of, nbrs, f_bs = topo.server_at, topo.host_of, topo.neighbors, self._f_bs
        d_ap = d_ap if d_ap is not None else delays.ap.tolist()
        path, visited, evaluations = [ap], {ap}, 0
        while len(path) <= self.max_hops:
            u = path[-1]
            if u in server_at and server_at[u] not in failed:
                return Route(tuple(path), server_at[u], 1.0), evaluations
            direct = [server_at[v] for v in nbrs[u] if v in server_at and server_at[v] not in failed]
            if direct:
                evaluations += len(direct)
                best = min(direct, key=lambda l: (d_ap[u] + delays.server[l], l))
                return Route(tuple(path) + (host_of[best],), best, 1.0), evaluations
            options = [v for v in nbrs[u] if v not in visited]
            evaluations += len(options)
            if not options:
                break
            nxt = min(options, key=lambda v: (-f_bs[v], d_ap[v], v))
            path.append(nxt)
            visited.add(nxt)
        return cloud_route(ap), evaluations

    def _reroute(self, aps, delays, failed):
        changes, evaluations = {}, 0
        d_ap = delays.ap.tolist()
        for ap in sorted(aps):
            route, n = self.walk(ap, delays, failed, d_ap)
            changes[ap] = (route,)
            evaluations += n
        return changes, evaluations

    def on_failure(self, server, strategy, delays, failed, epoch):
        affected = strategy.members_of(server)
        self._displaced.setdefault(server, set()).update(affected)
        changes, evaluations = self._reroute(affected, delays, failed)
        return Outcome(strategy.updated(changes, epoch), Cost(evaluations, len(changes)))

    def on_repair(self, server, strategy, delays, failed, epoch):
        displaced = self._displaced.pop(server, set())
        changes, evaluations = self._reroute(displaced, delays, failed)
        return Outcome(strategy.updated(changes, epoch), Cost(evaluations, len(changes)))


class GlobalRecomputePolicy(RecoveryPolicy):
    """Reassigns every AP to its nearest operational server after each event."""

    name = "global_recompute"

    def recompute(self, failed: frozenset[int], epoch: str) -> Outcome:
        topo = self.topology
        operational = [s.id for s in topo.servers if s.id not in failed]
        if not operational:
            routes = {ap: (cloud_route(ap),) for ap in range(topo.m)}
            return Outcome(AllocationStrategy(routes, epoch), Cost(0, topo.m))
        new = strategy_from_tree(topo, operational, epoch)
        return Outcome(new, Cost(topo.m * len(operational), topo.m))

    def on_failure(self, server, strategy, delays, failed, epoch):
        return self.recompute(failed, epoch)

    def on_repair(self, server, strategy, delays, failed, epoch):
        return self.recompute(failed, epoch)


def global_recompute(topology: NetworkTopology, failed: frozenset[int], epoch: str = "recomputed") -> AllocationStrategy:
    """Full reassignment; raises when no server is operational."""
    if len(failed) >= topology.l:
        raise AllocationError("no operational server")
    return GlobalRecomputePolicy(topology).recompute(failed, epoch).strategy


POLICIES: dict[str, Callable[[NetworkTopology], RecoveryPolicy]] = {
    "fodt": FodtPolicy,
    "cloud_assistant": CloudAssistantPolicy,
    "greedy": GreedyPolicy,
    "global_recompute": GlobalRecomputePolicy,
}


def make_policy(name: str, topology: NetworkTopology) -> RecoveryPolicy:
    try:
        return POLICIES[name](topology)
    except KeyError:
        raise ValueError(f"unknown policy {name!r}; choose from {sorted(POLICIES)}") from None


__all__ = [
    "CLOUD",
    "CloudAssistantPolicy",
    "FodtPolicy",
    "GlobalRecomputePolicy",
    "GreedyPolicy",
    "Outcome",
    "POLICIES",
    "RecoveryPolicy",
    "global_recompute",
    "make_policy",
]
