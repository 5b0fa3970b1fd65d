"""Offloading strategies: representation, validation, delay and the exhaustive oracle.

A strategy maps every AP to one or more routes. A route is the AP path the
AP's traffic follows (origin first, the serving server's host last) with
the share of the AP's load it carries. The forwarding indicator, the split
proportions and the AP-server assignment are all derived from the routes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, milp
from scipy.sparse import coo_matrix

from .delay_model import CLOUD, CloudLink, QueueState, RoutingMatrices, slot_delays
from .topology import Coverage, NetworkTopology, shortest_delay_tree

FORMAT_VERSION = 1
DEFAULT_LEVELS = 10
ORACLE_MAX_APS = 12
ORACLE_MAX_SERVERS = 4


class AllocationError(ValueError):
    pass


class Route(NamedTuple):
    path: tuple[int, ...]
    server: int
    share: float = 1.0


def cloud_route(ap: int) -> Route:
    return Route((ap,), CLOUD, 1.0)


@dataclass(frozen=True)
class Cost:
    """Recomputation cost of one policy action."""

    evaluations: int = 0
    writes: int = 0

    @property
    def count(self) -> int:
        return self.evaluations + self.writes

    def __add__(self, other: Cost) -> Cost:
        return Cost(self.evaluations + other.evaluations, self.writes + other.writes)


@dataclass(frozen=True)
class AllocationStrategy:
    routes: Mapping[int, tuple[Route, ...]]
    epoch: str = "pre-failure"

    def server_of(self, ap: int) -> int:
        """Assigned server; CLOUD for cloud-bound APs."""
        servers = {r.server for r in self.routes[ap]}
        if len(servers) != 1:
            raise AllocationError(f"AP {ap} is split across servers {sorted(servers)}")
        return servers.pop()

    @property
    def assignment(self) -> dict[int, int]:
        return {ap: self.server_of(ap) for ap in self.routes}

    @property
    def cloud_aps(self) -> set[int]:
        return {ap for ap, rs in self.routes.items() if any(r.server == CLOUD for r in rs)}

    def forwarders(self, ap: int) -> dict[int, float]:
        """Relay APs of ``ap`` and the share of its load each relays."""
        out: dict[int, float] = {}
        for r in self.routes[ap]:
            for j in r.path[1:-1]:
                out[j] = out.get(j, 0.0) + r.share
        return out

    def members_of(self, server: int) -> set[int]:
        out = set()
        for ap, rs in self.routes.items():
            for r in rs:
                if r.server == server:
                    out.add(ap)
                    break
        return out

    def updated(self, changes: Mapping[int, tuple[Route, ...]], epoch: str | None = None) -> AllocationStrategy:
        routes = dict(self.routes)
        routes.update(changes)
        return AllocationStrategy(routes, self.epoch if epoch is None else epoch)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "epoch": self.epoch,
            "routes": {
                str(ap): [{"path": list(r.path), "server": r.server, "share": r.share} for r in rs]
                for ap, rs in sorted(self.routes.items())
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> AllocationStrategy:
        if doc.get("format_version") != FORMAT_VERSION:
            raise AllocationError(f"unsupported strategy format_version {doc.get('format_version')!r}")
        routes = {
            int(ap): tuple(Route(tuple(r["path"]), r["server"], r["share"]) for r in rs)
            for ap, rs in doc["routes"].items()
        }
        return cls(routes, doc["epoch"])

    @classmethod
    def from_json(cls, text: str) -> AllocationStrategy:
        return cls.from_dict(json.loads(text))


def baseline_strategy(topology: NetworkTopology) -> AllocationStrategy:
    """Every AP follows its coverage's routing tree to its home server."""
    routes = {}
    for cov in topology.coverages:
        for ap in cov.members:
            routes[ap] = (Route(cov.path_to_root(ap), cov.server, 1.0),)
    return AllocationStrategy(routes, "pre-failure")


def strategy_from_tree(
    topology: NetworkTopology, servers: Iterable[int], epoch: str = "pre-failure"
) -> AllocationStrategy:
    """Attach every AP to the nearest of ``servers`` along shortest-delay paths."""
    server_of, next_hop, _ = shortest_delay_tree(topology, servers)
    routes = {}
    for ap in range(topology.m):
        if ap not in server_of:
            routes[ap] = (cloud_route(ap),)
            continue
        path = [ap]
        while path[-1] in next_hop:
            path.append(next_hop[path[-1]])
        routes[ap] = (Route(tuple(path), server_of[ap], 1.0),)
    return AllocationStrategy(routes, epoch)


# --- validation ----------------------------------------------------------

CONSTRAINTS = ("forwarding", "proportions", "assignment", "ap_capacity", "server_capacity")


@dataclass
class ValidationReport:
    """Offending ids per constraint; a constraint passes when its list is empty."""

    violations: dict[str, list] = field(default_factory=lambda: {c: [] for c in CONSTRAINTS})

    @property
    def ok(self) -> bool:
        return not any(self.violations.values())

    def passed(self, constraint: str) -> bool:
        return not self.violations[constraint]

    def add(self, constraint: str, item) -> None:
        self.violations[constraint].append(item)

    def __str__(self) -> str:
        lines = [f"{c}: {'pass' if not v else 'FAIL ' + repr(v[:5])}" for c, v in self.violations.items()]
        return "\n".join(lines)


def _on_grid(x: float, levels: int) -> bool:
    return abs(x * levels - round(x * levels)) < 1e-9


def validate_strategy(
    strategy: AllocationStrategy,
    topology: NetworkTopology,
    failed: Iterable[int] = (),
    levels: int = DEFAULT_LEVELS,
) -> ValidationReport:
    """Check forwarding chains, split proportions, single assignment and capacity caps.

    Cloud-bound APs are legal; they are excluded from the server assignment.
    """
    report = ValidationReport()
    failed = set(failed)
    adjacency = topology.adjacency
    host_of = topology.host_of
    for ap in range(topology.m):
        routes = strategy.routes.get(ap)
        if not routes:
            report.add("assignment", ap)
            continue
        total = 0.0
        for r in routes:
            if not 0.0 <= r.share <= 1.0 or not _on_grid(r.share, levels):
                report.add("proportions", ap)
            total += r.share
            if not r.path or r.path[0] != ap:
                report.add("forwarding", ap)
                continue
            if r.server == CLOUD:
                if len(r.path) != 1:
                    report.add("forwarding", ap)
                continue
            if r.server not in host_of or r.server in failed:
                report.add("assignment", ap)
                continue
            if len(set(r.path)) != len(r.path):
                report.add("forwarding", ap)
            elif r.path[-1] != host_of[r.server]:
                report.add("forwarding", ap)
            elif any((min(a, b), max(a, b)) not in adjacency for a, b in zip(r.path, r.path[1:])):
                report.add("forwarding", ap)
        if abs(total - 1.0) > 1e-9:
            report.add("proportions", ap)
        if len({r.server for r in routes}) != 1:
            report.add("assignment", ap)
    for ap in topology.aps:
        if ap.f_bs > topology.f_bs_max + 1e-9 or ap.f_bs <= 0:
            report.add("ap_capacity", ap.id)
    for s in topology.servers:
        if s.f_es > topology.f_es_max + 1e-9 or s.f_es <= 0:
            report.add("server_capacity", s.id)
    return report


def require_valid(strategy: AllocationStrategy, topology: NetworkTopology, failed: Iterable[int] = ()) -> None:
    report = validate_strategy(strategy, topology, failed)
    if not report.ok:
        raise AllocationError(f"invalid strategy:\n{report}")


# --- delay ---------------------------------------------------------------


def per_ap_delays(
    strategy: AllocationStrategy,
    topology: NetworkTopology,
    queues: QueueState | None = None,
    cloud: CloudLink = CloudLink(),
    slot: float = 1.0,
) -> np.ndarray:
    """End-to-end delay of every AP for one slot of the strategy's load."""
    if queues is None:
        queues = QueueState.empty(topology)
    mats = RoutingMatrices.from_strategy(strategy, topology)
    return slot_delays(mats, topology, queues, cloud, slot).e2e


def total_network_delay(
    strategy: AllocationStrategy,
    topology: NetworkTopology,
    queues: QueueState | None = None,
    cloud: CloudLink = CloudLink(),
    slot: float = 1.0,
    failed: Iterable[int] = (),
) -> float:
    require_valid(strategy, topology, failed)
    return float(per_ap_delays(strategy, topology, queues, cloud, slot).sum())


def _tree_path_optimum(
    topology: NetworkTopology,
    queues: QueueState,
    operational: list[int],
    slot: float,
    batch: int,
) -> tuple[dict[int, tuple[Route, ...]], float]:
    """Best assignment when every AP uses its shortest-delay-tree path to its server."""
    m = topology.m
    paths: list[list[tuple[int, ...]]] = []
    relay = np.zeros((len(operational), m, m))
    for k, sid in enumerate(operational):
        server_of, next_hop, _ = shortest_delay_tree(topology, [sid])
        per_ap = []
        for ap in range(m):
            if ap not in server_of:
                raise AllocationError(f"AP {ap} cannot reach server {sid}")
            path = [ap]
            while path[-1] in next_hop:
                path.append(next_hop[path[-1]])
            per_ap.append(tuple(path))
            relay[k, ap, path[:-1]] = 1.0
        paths.append(per_ap)

    data, work = topology.data_rate, topology.work_rate
    f_bs, f_es = topology.f_bs, topology.f_es[operational]
    q_ap, q_srv = queues.ap, queues.server[operational]
    n_op = len(operational)
    cols = np.arange(m)
    radix = n_op ** np.arange(m)
    best_total, best_choice = np.inf, None
    for start in range(0, n_op**m, batch):
        idx = np.arange(start, min(start + batch, n_op**m))
        chunk = (idx[:, None] // radix) % n_op  # (B, M) server index per AP
        gathered = relay[chunk, cols]  # (B, M, M): transmitters of AP i's route
        arr_ap = np.einsum("bik,i->bk", gathered, data)
        onehot = chunk[:, :, None] == np.arange(n_op)
        arr_srv = np.einsum("bil,i->bl", onehot, work)
        d_ap = (q_ap + arr_ap * slot) / f_bs
        d_srv = (q_srv + arr_srv * slot) / f_es
        totals = np.einsum("bik,bk->b", gathered, d_ap) + np.take_along_axis(d_srv, chunk, axis=1).sum(axis=1)
        j = int(np.argmin(totals))
        if totals[j] < best_total - 1e-12:
            best_total, best_choice = float(totals[j]), chunk[j].copy()
    routes = {
        ap: (Route(paths[k][ap], operational[k], 1.0),) for ap, k in enumerate(best_choice.tolist())
    }
    return routes, best_total


def _route_search(
    topology: NetworkTopology,
    queues: QueueState,
    operational: list[int],
    slot: float,
    ceiling: float = np.inf,
) -> tuple[dict[int, tuple[Route, ...]], float]:
    """Exact minimum over assignments and simple routes as a 0-1 program.

    Every AP sends one unit of flow over directed links into one
    operational server. ``u[a, k]`` marks AP ``a`` transmitting at AP ``k``
    and ``v[a, s]`` marks it using server ``s``. All users of an element see
    that element's delay, so the objective has a term per pair of APs that
    share it; the pair variable is pushed up to ``u[a, k] + u[b, k] - 1``
    and, with positive costs, settles on the product.
    """
    m = topology.m
    nbrs = topology.neighbors
    f_bs, f_es = topology.f_bs, topology.f_es
    data, work = slot * topology.data_rate, slot * topology.work_rate
    hosts = {topology.servers[sid].host_ap: sid for sid in operational}
    arcs = [(u, v) for u in range(m) for v in nbrs[u]]
    sinks = [(h, sid) for h, sid in hosts.items()]
    n_arc, n_sink = len(arcs), len(sinks)
    per_ap = n_arc + n_sink
    pairs = [(a, b) for a in range(m) for b in range(a + 1, m)]
    n_flow = m * per_ap
    ap_pair0 = n_flow
    srv_pair0 = ap_pair0 + len(pairs) * m
    n_var = srv_pair0 + len(pairs) * len(sinks)

    cost = np.zeros(n_var)
    rows, cols, vals, lo, hi = [], [], [], [], []
    row = 0

    def add_row(entries, low, high):
        nonlocal row
        for c, v in entries:
            rows.append(row)
            cols.append(c)
            vals.append(v)
        lo.append(low)
        hi.append(high)
        row += 1

    out_arcs = [[] for _ in range(m)]
    in_arcs = [[] for _ in range(m)]
    for j, (u, v) in enumerate(arcs):
        out_arcs[u].append(j)
        in_arcs[v].append(j)
    sink_at = {h: n_arc + j for j, (h, _) in enumerate(sinks)}

    def x(a: int, j: int) -> int:
        return a * per_ap + j

    for a in range(m):
        for k in range(m):
            outflow = [(x(a, j), 1.0) for j in out_arcs[k]]
            if k in sink_at:
                outflow.append((x(a, sink_at[k]), 1.0))
            inflow = [(x(a, j), -1.0) for j in in_arcs[k]]
            supply = 1.0 if k == a else 0.0
            add_row(outflow + inflow, supply, supply)
            add_row(outflow, 0.0, 1.0)
        # own and lone cost: transmitting at k, processing at s
        for j, (u, _) in enumerate(arcs):
            cost[x(a, j)] = (queues.ap[u] + data[a]) / f_bs[u]
        for j, (_, sid) in enumerate(sinks):
            cost[x(a, n_arc + j)] = (queues.server[sid] + work[a]) / f_es[sid]

    for p, (a, b) in enumerate(pairs):
        for k in range(m):
            y = ap_pair0 + p * m + k
            cost[y] = (data[a] + data[b]) / f_bs[k]
            entries = [(y, 1.0)]
            entries += [(x(a, j), -1.0) for j in out_arcs[k]]
            entries += [(x(b, j), -1.0) for j in out_arcs[k]]
            add_row(entries, -1.0, np.inf)
        for j, (_, sid) in enumerate(sinks):
            y = srv_pair0 + p * n_sink + j
            cost[y] = (work[a] + work[b]) / f_es[sid]
            add_row([(y, 1.0), (x(a, n_arc + j), -1.0), (x(b, n_arc + j), -1.0)], -1.0, np.inf)

    if np.isfinite(ceiling):
        # a known feasible total lets the solver discard worse branches early
        add_row([(c, v) for c, v in enumerate(cost) if v], -np.inf, ceiling * (1 + 1e-9))
    matrix = coo_matrix((vals, (rows, cols)), shape=(row, n_var))
    integrality = np.zeros(n_var)
    integrality[:n_flow] = 1
    upper = np.ones(n_var)
    upper[n_flow:] = np.inf
    result = milp(
        cost,
        constraints=LinearConstraint(matrix, lo, hi),
        integrality=integrality,
        bounds=Bounds(np.zeros(n_var), upper),
        options={"mip_rel_gap": 0.0},
    )
    if not result.success:
        raise AllocationError(f"exact search failed: {result.message}")
    sol = np.round(result.x[:n_flow]).astype(int)
    routes: dict[int, tuple[Route, ...]] = {}
    for a in range(m):
        chosen = sol[a * per_ap : (a + 1) * per_ap]
        nxt = {arcs[j][0]: arcs[j][1] for j in range(n_arc) if chosen[j]}
        path = [a]
        while path[-1] in nxt:
            path.append(nxt[path[-1]])
        sid = next(sinks[j][1] for j in range(n_sink) if chosen[n_arc + j] and sinks[j][0] == path[-1])
        routes[a] = (Route(tuple(path), sid, 1.0),)
    return routes, float(result.fun)


def brute_force_optimal(
    topology: NetworkTopology,
    queues: QueueState | None,
    failed: Iterable[int],
    slot: float = 1.0,
    batch: int = 1 << 14,
    tree_paths_only: bool = False,
) -> tuple[AllocationStrategy, float]:
    """Minimum-delay unsplit strategy over all assignments and all simple routes.

    Solved exactly as a 0-1 program; ``tree_paths_only`` restricts every
    AP to its shortest-delay-tree path and enumerates the assignments.
    """
    m, n_servers = topology.m, topology.l
    if m > ORACLE_MAX_APS or n_servers > ORACLE_MAX_SERVERS:
        raise AllocationError(
            f"instance too large for exhaustive search ({m} APs, {n_servers} servers; "
            f"limit {ORACLE_MAX_APS}/{ORACLE_MAX_SERVERS})"
        )
    if queues is None:
        queues = QueueState.empty(topology)
    failed = set(failed)
    operational = [s.id for s in topology.servers if s.id not in failed]
    if not operational:
        raise AllocationError("no operational server: no feasible assignment")
    routes, total = _tree_path_optimum(topology, queues, operational, slot, batch)
    if not tree_paths_only:
        routes, total = _route_search(topology, queues, operational, slot, ceiling=total)
    return AllocationStrategy(routes, "oracle"), total


# --- cache ---------------------------------------------------------------


@dataclass(frozen=True)
class Fragment:
    server: int
    routes: Mapping[int, tuple[Route, ...]]


def capture_fragment(strategy: AllocationStrategy, coverage: Coverage) -> Fragment:
    return Fragment(coverage.server, {ap: strategy.routes[ap] for ap in sorted(coverage.members)})


class StrategyCache:
    """Pre-failure fragments keyed by server id."""

    def __init__(self) -> None:
        self._fragments: dict[int, Fragment] = {}

    def __contains__(self, server: int) -> bool:
        return server in self._fragments

    def capture(self, strategy: AllocationStrategy, coverage: Coverage) -> Fragment:
        frag = capture_fragment(strategy, coverage)
        self._fragments[coverage.server] = frag
        return frag

    def get(self, server: int) -> Fragment:
        try:
            return self._fragments[server]
        except KeyError:
            raise AllocationError(f"no cached fragment for server {server}") from None

    def pop(self, server: int) -> Fragment:
        frag = self.get(server)
        del self._fragments[server]
        return frag


def restore_fragment(
    cache: StrategyCache | Mapping[int, Fragment], server: int, strategy: AllocationStrategy, epoch: str | None = None
) -> AllocationStrategy:
    if isinstance(cache, StrategyCache):
        frag = cache.get(server)
    elif server in cache:
        frag = cache[server]
    else:
        raise AllocationError(f"no cached fragment for server {server}")
    return strategy.updated(frag.routes, epoch)
