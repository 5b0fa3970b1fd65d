import os

from hypothesis import HealthCheck, settings

from edge_failover.topology import AccessPoint, EdgeServer, make_topology

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def ap(i, f_bs=20.0, data=(2.0,), work=None, pos=None):
    work = data if work is None else work
    return AccessPoint(i, pos or (float(i), 0.0), f_bs, tuple(data), tuple(work))


def hand_topology(n_aps, edges, hosts, f_bs=20.0, f_es=40.0, data=2.0, work=None, f_bs_by_ap=None):
    """Topology from an explicit edge list; server k sits on AP hosts[k]."""
    f_bs_by_ap = f_bs_by_ap or {}
    aps = [ap(i, f_bs_by_ap.get(i, f_bs), (data,), None if work is None else (work,)) for i in range(n_aps)]
    f_es_list = f_es if isinstance(f_es, (list, tuple)) else [f_es] * len(hosts)
    servers = [EdgeServer(k, h, f_es_list[k]) for k, h in enumerate(hosts)]
    return make_topology(aps, servers, edges)


def line_topology(n, host=0, **kw):
    return hand_topology(n, [(i, i + 1) for i in range(n - 1)], [host], **kw)


# Two coverages. Server 0 on AP 0 serves APs 0-4 (AP 2 two hops out);
# server 1 on AP 5 serves APs 5-7. AP 2 is the only member of the first
# coverage with outside links, to APs 6 and 7.
TWO_COVERAGE_EDGES = [(0, 1), (1, 2), (0, 3), (0, 4), (2, 6), (2, 7), (5, 6), (5, 7)]


def two_coverage_topology(slow_seven=True):
    f_bs = {7: 10.0} if slow_seven else {}
    return hand_topology(8, TWO_COVERAGE_EDGES, [0, 5], f_bs_by_ap=f_bs)
