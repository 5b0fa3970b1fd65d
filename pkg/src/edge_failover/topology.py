"""Synthetic AP/server network, server coverages and routing trees."""

from __future__ import annotations

import dataclasses
import heapq
import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import networkx as nx
import numpy as np
from scipy.sparse.csgraph import shortest_path

FORMAT_VERSION = 1

# Upper bounds of the uniform parameter intervals; also the capacity caps.
F_BS_RANGE = (16.0, 24.0)
F_ES_RANGE = (32.0, 48.0)
TASK_RATE_RANGE = (3.0, 5.0)
TASK_WORK_RANGE = (0.5, 1.0)
TASK_SIZE_RANGE = (0.5, 1.0)


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class AccessPoint:
    id: int
    position: tuple[float, float]
    f_bs: float
    # per attached user: data rate (Mbit/s) and workload rate (MFLOP/s)
    user_rates: tuple[float, ...] = ()
    user_work: tuple[float, ...] = ()

    @property
    def attached_users(self) -> int:
        return len(self.user_rates)

    @property
    def data_rate(self) -> float:
        """Aggregate data rate handed to the AP by its users."""
        return float(sum(self.user_rates))

    @property
    def work_rate(self) -> float:
        return float(sum(self.user_work))


@dataclass(frozen=True)
class EdgeServer:
    id: int
    host_ap: int
    f_es: float


@dataclass(frozen=True)
class Coverage:
    server: int
    members: frozenset[int]
    # AP -> next hop toward the host AP; the host itself is not a key
    routing_tree: dict[int, int]
    depth: int

    def path_to_root(self, ap: int) -> tuple[int, ...]:
        path = [ap]
        while path[-1] in self.routing_tree:
            path.append(self.routing_tree[path[-1]])
            if len(path) > len(self.members) + 1:
                raise TopologyError(f"routing tree of server {self.server} has a cycle")
        return tuple(path)

    @cached_property
    def root(self) -> int:
        roots = self.members - set(self.routing_tree)
        if len(roots) != 1:
            raise TopologyError(f"coverage of server {self.server} has {len(roots)} roots")
        return next(iter(roots))

    @cached_property
    def children(self) -> dict[int, tuple[int, ...]]:
        kids: dict[int, list[int]] = {ap: [] for ap in self.members}
        for ap, parent in self.routing_tree.items():
            kids[parent].append(ap)
        return {ap: tuple(sorted(c)) for ap, c in kids.items()}


@dataclass(frozen=True)
class NetworkTopology:
    aps: tuple[AccessPoint, ...]
    servers: tuple[EdgeServer, ...]
    adjacency: frozenset[tuple[int, int]]
    coverages: tuple[Coverage, ...] = ()
    depth_limit: int = 3
    f_bs_max: float = F_BS_RANGE[1]
    f_es_max: float = F_ES_RANGE[1]

    @property
    def m(self) -> int:
        return len(self.aps)

    @property
    def l(self) -> int:
        return len(self.servers)

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        nbrs: list[list[int]] = [[] for _ in self.aps]
        for a, b in self.adjacency:
            nbrs[a].append(b)
            nbrs[b].append(a)
        return tuple(tuple(sorted(n)) for n in nbrs)

    @cached_property
    def host_of(self) -> dict[int, int]:
        return {s.id: s.host_ap for s in self.servers}

    @cached_property
    def server_at(self) -> dict[int, int]:
        return {s.host_ap: s.id for s in self.servers}

    @cached_property
    def coverage_by_server(self) -> dict[int, Coverage]:
        return {c.server: c for c in self.coverages}

    @cached_property
    def home_server(self) -> dict[int, int]:
        """Pre-failure server of every AP."""
        return {ap: c.server for c in self.coverages for ap in c.members}

    @cached_property
    def f_bs(self) -> np.ndarray:
        return np.array([ap.f_bs for ap in self.aps])

    @cached_property
    def f_es(self) -> np.ndarray:
        return np.array([s.f_es for s in self.servers])

    @cached_property
    def data_rate(self) -> np.ndarray:
        return np.array([ap.data_rate for ap in self.aps])

    @cached_property
    def work_rate(self) -> np.ndarray:
        return np.array([ap.work_rate for ap in self.aps])

    def graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.m))
        g.add_edges_from(self.adjacency)
        return g

    def with_coverages(self, coverages: Sequence[Coverage]) -> NetworkTopology:
        return NetworkTopology(
            aps=self.aps,
            servers=self.servers,
            adjacency=self.adjacency,
            coverages=tuple(coverages),
            depth_limit=self.depth_limit,
            f_bs_max=self.f_bs_max,
            f_es_max=self.f_es_max,
        )

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "depth_limit": self.depth_limit,
            "f_bs_max": self.f_bs_max,
            "f_es_max": self.f_es_max,
            "aps": [
                {
                    "id": ap.id,
                    "position": list(ap.position),
                    "f_bs": ap.f_bs,
                    "user_rates": list(ap.user_rates),
                    "user_work": list(ap.user_work),
                }
                for ap in self.aps
            ],
            "servers": [{"id": s.id, "host_ap": s.host_ap, "f_es": s.f_es} for s in self.servers],
            "adjacency": sorted([list(e) for e in self.adjacency]),
            "coverages": [
                {
                    "server": c.server,
                    "members": sorted(c.members),
                    "routing_tree": {str(k): v for k, v in sorted(c.routing_tree.items())},
                    "depth": c.depth,
                }
                for c in self.coverages
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> NetworkTopology:
        version = doc.get("format_version")
        if version != FORMAT_VERSION:
            raise TopologyError(f"unsupported topology format_version {version!r}")
        aps = tuple(
            AccessPoint(
                id=a["id"],
                position=tuple(a["position"]),
                f_bs=a["f_bs"],
                user_rates=tuple(a["user_rates"]),
                user_work=tuple(a["user_work"]),
            )
            for a in doc["aps"]
        )
        servers = tuple(EdgeServer(s["id"], s["host_ap"], s["f_es"]) for s in doc["servers"])
        coverages = tuple(
            Coverage(
                server=c["server"],
                members=frozenset(c["members"]),
                routing_tree={int(k): v for k, v in c["routing_tree"].items()},
                depth=c["depth"],
            )
            for c in doc["coverages"]
        )
        return cls(
            aps=aps,
            servers=servers,
            adjacency=frozenset(tuple(e) for e in doc["adjacency"]),
            coverages=coverages,
            depth_limit=doc["depth_limit"],
            f_bs_max=doc["f_bs_max"],
            f_es_max=doc["f_es_max"],
        )

    @classmethod
    def from_json(cls, text: str) -> NetworkTopology:
        return cls.from_dict(json.loads(text))


def make_topology(
    aps: Sequence[AccessPoint],
    servers: Sequence[EdgeServer],
    edges: Iterable[tuple[int, int]],
    depth_limit: int | None = None,
) -> NetworkTopology:
    """Assemble a topology from explicit parts and compute its coverages.

    ``depth_limit=None`` skips the depth check (hand-built scenarios).
    """
    adjacency = frozenset((min(a, b), max(a, b)) for a, b in edges if a != b)
    ids = [ap.id for ap in aps]
    if ids != list(range(len(aps))):
        raise TopologyError("AP ids must be 0..M-1 in order")
    if sorted(s.id for s in servers) != list(range(len(servers))):
        raise TopologyError("server ids must be 0..L-1")
    if len({s.host_ap for s in servers}) != len(servers):
        raise TopologyError("two servers share a host AP")
    for s in servers:
        if not 0 <= s.host_ap < len(aps):
            raise TopologyError(f"server {s.id} hosted on unknown AP {s.host_ap}")
    topo = NetworkTopology(
        aps=tuple(aps),
        servers=tuple(sorted(servers, key=lambda s: s.id)),
        adjacency=adjacency,
        depth_limit=depth_limit if depth_limit is not None else len(aps),
    )
    return topo.with_coverages(build_coverages(topo))


def shortest_delay_tree(
    topology: NetworkTopology, servers: Iterable[int]
) -> tuple[dict[int, int], dict[int, int], dict[int, int]]:
    """Multi-source search from the hosts of ``servers``.

    Every AP is attached to the server minimising (hop count, unit-size
    delay, server id). Returns (server_of, next_hop, hops).
    """
    f_bs = topology.f_bs
    nbrs = topology.neighbors
    heap: list[tuple[int, float, int, int, int]] = []
    for sid in sorted(servers):
        server = topology.servers[sid]
        heap.append((0, 1.0 / server.f_es, sid, server.host_ap, -1))
    heapq.heapify(heap)
    server_of: dict[int, int] = {}
    next_hop: dict[int, int] = {}
    hops: dict[int, int] = {}
    while heap:
        h, delay, sid, ap, parent = heapq.heappop(heap)
        if ap in server_of:
            continue
        server_of[ap] = sid
        hops[ap] = h
        if parent >= 0:
            next_hop[ap] = parent
        for v in nbrs[ap]:
            if v not in server_of:
                heapq.heappush(heap, (h + 1, delay + 1.0 / f_bs[v], sid, v, ap))
    return server_of, next_hop, hops


def build_coverages(topology: NetworkTopology, servers: Iterable[int] | None = None) -> list[Coverage]:
    """Baseline allocation: nearest server by hops, then modelled delay, then id."""
    if servers is None:
        servers = [s.id for s in topology.servers]
    servers = sorted(servers)
    server_of, next_hop, hops = shortest_delay_tree(topology, servers)
    if len(server_of) != topology.m:
        missing = sorted(set(range(topology.m)) - set(server_of))
        raise TopologyError(f"APs unreachable from any server: {missing[:10]}")
    members: dict[int, set[int]] = {sid: set() for sid in servers}
    for ap, sid in server_of.items():
        members[sid].add(ap)
    coverages = []
    for sid in servers:
        tree = {ap: next_hop[ap] for ap in members[sid] if ap in next_hop}
        depth = max(hops[ap] for ap in members[sid])
        coverages.append(Coverage(sid, frozenset(members[sid]), tree, depth))
    return coverages


def edge_aps(coverage: Coverage, topology: NetworkTopology) -> set[int]:
    """Members with at least one neighbour outside the coverage."""
    nbrs = topology.neighbors
    return {ap for ap in coverage.members if any(v not in coverage.members for v in nbrs[ap])}


def neighbor_servers(server: int, topology: NetworkTopology) -> set[int]:
    cov = topology.coverage_by_server[server]
    home = topology.home_server
    out = set()
    for ap in cov.members:
        for v in topology.neighbors[ap]:
            if v not in cov.members:
                out.add(home[v])
    return out


def _farthest_first(graph: nx.Graph, k: int, rng: np.random.Generator) -> list[int]:
    """Greedy k-centre placement in hop distance; ties broken by a seeded order."""
    order = rng.permutation(graph.number_of_nodes())
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    chosen = [int(order[0])]
    dist = dict(nx.single_source_shortest_path_length(graph, chosen[0]))
    best = np.array([dist[v] for v in range(graph.number_of_nodes())], dtype=float)
    while len(chosen) < k:
        # max distance, lowest seeded rank among ties
        cand = int(np.lexsort((rank, -best))[0])
        chosen.append(cand)
        for v, d in nx.single_source_shortest_path_length(graph, cand).items():
            if d < best[v]:
                best[v] = d
    return chosen


def _lexicographic_trees(
    graph: nx.Graph, f_bs: np.ndarray, f_es_at: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Search keys and tree parents of every AP under every candidate host.

    ``keys[h, v]`` combines the hop count with the smallest unit delay over
    minimum-hop paths, and ``parent[h, v]`` is v's next hop toward h, so
    that an argmin over hosts reproduces :func:`build_coverages` up to the
    server-id tie-break. Also returns the hop matrix.
    """
    m = graph.number_of_nodes()
    dist = shortest_path(nx.to_scipy_sparse_array(graph, nodelist=range(m)), unweighted=True)
    delay = np.full((m, m), np.inf)
    delay[np.arange(m), np.arange(m)] = 1.0 / f_es_at
    parent = np.full((m, m), -1)
    nbrs = [np.array(sorted(graph.neighbors(v)), dtype=int) for v in range(m)]
    for k in range(1, int(dist.max()) + 1):
        for v in range(m):
            rows = np.flatnonzero(dist[:, v] == k)
            if rows.size == 0:
                continue
            nb = nbrs[v]
            via = np.where(dist[np.ix_(rows, nb)] == k - 1, delay[np.ix_(rows, nb)], np.inf)
            pick = np.argmin(via, axis=1)  # first minimum is the lowest AP id
            delay[rows, v] = via[np.arange(rows.size), pick] + 1.0 / f_bs[v]
            parent[rows, v] = nb[pick]
    return dist * 1e3 + delay, parent, dist


def _balance_placement(
    trees: tuple[np.ndarray, np.ndarray, np.ndarray],
    hosts: list[int],
    data: np.ndarray,
    work: np.ndarray,
    f_bs: np.ndarray,
    f_es_at: np.ndarray,
    max_iter: int = 300,
) -> list[int]:
    """Local search that relocates servers to even out utilisation.

    Utilisation covers each server's workload and each relaying AP's
    transmitted data along the coverage routing trees. The objective is the
    largest utilisation, then the sum of squared server utilisations.
    """
    keys, parent, dist = trees
    hosts = list(hosts)
    n, m = len(hosts), len(data)
    cols = np.arange(m)

    def evaluate(h: list[int]) -> tuple[tuple[float, float], np.ndarray, np.ndarray]:
        h_arr = np.asarray(h)
        cell = np.argmin(keys[h_arr], axis=0)
        srv_util = np.bincount(cell, weights=work, minlength=n) / f_es_at[h_arr]
        root = h_arr[cell]
        hops = dist[root, cols]
        up = parent[root, cols]
        carried = data.copy()
        for k in range(int(hops.max()), 1, -1):
            mask = hops == k
            np.add.at(carried, up[mask], carried[mask])
        carried[h_arr] = 0.0
        ap_util = carried / f_bs
        peak = srv_util.copy()
        np.maximum.at(peak, cell, ap_util)
        return (float(peak.max()), float((srv_util**2).sum())), cell, peak

    best, cell, peak = evaluate(hosts)
    for _ in range(max_iter):
        worst = int(np.argmax(peak))
        worst_members = np.flatnonzero(cell == worst)
        near = np.flatnonzero(dist[worst_members].min(axis=0) <= 1)
        movers = sorted({worst} | set(cell[near].tolist()))
        taken = set(hosts)
        improved = None
        for k in movers:
            targets = set(np.flatnonzero(cell == k).tolist()) | set(worst_members.tolist())
            for v in sorted(targets - taken):
                trial = hosts.copy()
                trial[k] = v
                score, trial_cell, trial_peak = evaluate(trial)
                if score < best and (improved is None or score < improved[0]):
                    improved = (score, trial, trial_cell, trial_peak)
        if improved is None:
            break
        best, hosts, cell, peak = improved
    return hosts


def generate_topology(
    seed: int,
    m: int,
    mu: float | None = None,
    depth_limit: int = 3,
    *,
    n_servers: int | None = None,
    users_per_ap: tuple[int, int] = (1, 1),
    radius_factor: float = 1.2,
    max_retries: int = 40,
    f_bs_range: tuple[float, float] = F_BS_RANGE,
    f_es_range: tuple[float, float] = F_ES_RANGE,
    task_rate_range: tuple[float, float] = TASK_RATE_RANGE,
    task_work_range: tuple[float, float] = TASK_WORK_RANGE,
    task_size_range: tuple[float, float] = TASK_SIZE_RANGE,
) -> NetworkTopology:
    """Random geometric AP graph on the unit square with ``floor(mu*m)`` servers.

    Pass ``n_servers`` instead of ``mu`` to hold the server count fixed.
    AP positions and parameters depend only on ``(seed, m)``. Servers are
    seeded by farthest-first placement, then moved to balance the workload
    of their coverages against their capacities.
    """
    if m < 2:
        raise TopologyError("need at least 2 APs")
    if n_servers is None:
        if mu is None:
            raise TopologyError("give mu or n_servers")
        if not 0.0 < mu < 1.0:
            raise TopologyError(f"deployment ratio must be in (0, 1), got {mu}")
        n_servers = int(math.floor(mu * m + 1e-9))
    if n_servers < 1:
        raise TopologyError("deployment ratio yields no server")
    if n_servers >= m:
        raise TopologyError("need fewer servers than APs")
    for name, (lo, hi) in {
        "f_bs_range": f_bs_range,
        "f_es_range": f_es_range,
        "task_rate_range": task_rate_range,
        "task_work_range": task_work_range,
        "task_size_range": task_size_range,
    }.items():
        if not 0 < lo <= hi:
            raise TopologyError(f"{name} must satisfy 0 < low <= high, got ({lo}, {hi})")

    rng = np.random.default_rng(seed)
    pos = rng.random((m, 2))
    f_bs = rng.uniform(*f_bs_range, size=m)
    f_es_at = rng.uniform(*f_es_range, size=m)
    users = rng.integers(users_per_ap[0], users_per_ap[1] + 1, size=m)
    aps = []
    for i in range(m):
        n = int(users[i])
        rate = rng.uniform(*task_rate_range, size=n)
        work = rng.uniform(*task_work_range, size=n)
        size = rng.uniform(*task_size_range, size=n)
        aps.append(
            AccessPoint(
                id=i,
                position=(float(pos[i, 0]), float(pos[i, 1])),
                f_bs=float(f_bs[i]),
                user_rates=tuple(float(x) for x in rate * size),
                user_work=tuple(float(x) for x in rate * work),
            )
        )
    radius = radius_factor * math.sqrt(math.log(m) / (math.pi * m))
    for _ in range(max_retries):
        g = nx.random_geometric_graph(m, radius, pos={i: tuple(pos[i]) for i in range(m)})
        if nx.is_connected(g):
            hosts = _farthest_first(g, n_servers, np.random.default_rng([seed, 1]))
            trees = _lexicographic_trees(g, f_bs, f_es_at)
            data_at = np.array([ap.data_rate for ap in aps])
            work_at = np.array([ap.work_rate for ap in aps])
            hosts = _balance_placement(trees, hosts, data_at, work_at, f_bs, f_es_at)
            servers = [EdgeServer(k, h, float(f_es_at[h])) for k, h in enumerate(hosts)]
            topo = make_topology(aps, servers, g.edges(), depth_limit=depth_limit)
            topo = dataclasses.replace(topo, f_bs_max=f_bs_range[1], f_es_max=f_es_range[1])
            if max(c.depth for c in topo.coverages) <= depth_limit:
                return topo
        radius *= 1.1
    raise TopologyError(
        f"no connected topology within depth {depth_limit} after {max_retries} attempts"
    )
