import random

import pytest

from meshmon import netsim
from meshmon.collector import make_envelope
from meshmon.records import LatencySample, PathMeasurement, ThroughputResult

CHAIN = """\
seed 7
node A B C D
link A B latency_ms=5 bandwidth_mbps=1000 mtu=9000
link B A latency_ms=5 bandwidth_mbps=1000 mtu=9000
link B C latency_ms=7 bandwidth_mbps=100 mtu=1500
link C B latency_ms=7 bandwidth_mbps=100 mtu=1500
link A D latency_ms=3 bandwidth_mbps=1000 mtu=9000
link D C latency_ms=3 bandwidth_mbps=1000 mtu=9000
route A B C
route C B A
route A B
route B C
"""


@pytest.fixture
def chain():
    return netsim.build_topology(CHAIN)


def line_topology(n_links, seed=1, **link):
    """Nodes N0..Nn joined in one direction, with one route N0 -> Nn."""
    nodes = [f"N{i}" for i in range(n_links + 1)]
    attrs = dict(latency_ms=1, bandwidth_mbps=100)
    attrs.update(link)
    args = " ".join(f"{k}={v}" for k, v in attrs.items())
    lines = [f"seed {seed}", "node " + " ".join(nodes)]
    lines += [f"link {a} {b} {args}" for a, b in zip(nodes, nodes[1:])]
    lines.append("route " + " ".join(nodes))
    return netsim.build_topology("\n".join(lines)), nodes[0], nodes[-1]


def random_route_topology(rng, mtu_choices, hops=None):
    """Random simple route through a random node set, per-link random MTU/latency/bandwidth.

    Returns (topo, src, dst, route).
    """
    n_nodes = rng.randint(3, 8)
    nodes = [f"R{i}" for i in range(n_nodes)]
    length = hops or rng.randint(1, n_nodes - 1)
    route = rng.sample(nodes, length + 1)
    on_route = set(zip(route, route[1:]))
    lines = [f"seed {rng.randrange(2**32)}", "node " + " ".join(nodes)]
    for a, b in zip(route, route[1:]):
        lines.append(
            f"link {a} {b} latency_ms={rng.uniform(0.1, 20):.3f} "
            f"jitter_ms={rng.uniform(0, 2):.3f} bandwidth_mbps={rng.choice([10, 100, 1000])} "
            f"mtu={rng.choice(mtu_choices)}")
    # off-route decoys with the smallest MTU must not affect the result
    decoys = {tuple(rng.sample(nodes, 2)) for _ in range(rng.randint(0, 3))} - on_route
    for a, b in sorted(decoys):
        lines.append(f"link {a} {b} latency_ms=1 bandwidth_mbps=1 mtu=576")
    lines.append("route " + " ".join(route))
    return netsim.build_topology("\n".join(lines)), route[0], route[-1], route


def latency(src="A", dst="C", start=0, sent=100, lost=0, d=12.0):
    if lost == sent:
        return LatencySample(src, dst, start, sent, lost)
    return LatencySample(src, dst, start, sent, lost, d, d, d)


def tput(mbps, start=0, src="A", dst="B"):
    return ThroughputResult(src, dst, start, mbps, 0, 64000)


def path(hops, start=0, src="A", reached=True, mtu=1500):
    hops = tuple((h, 1.0 + i) for i, h in enumerate(hops))
    return PathMeasurement(src, hops[-1][0] if reached else "Z", start, hops,
                           reached, mtu if reached else None)


def envelope(payload, src="ps-a", dst="ps-b", agent=None, stored=None, collected=None):
    stored = payload.start_time if stored is None else stored
    return make_envelope(payload, src, dst, agent or src, stored,
                         stored if collected is None else collected)


def random_envelopes(n, seed=0, hosts=("ps-a", "ps-b", "ps-c"), t_max=10_000):
    rng = random.Random(seed)
    out = []
    for i in range(n):
        src, dst = rng.sample(hosts, 2)
        start = rng.randrange(t_max)
        kind = rng.choice(["latency", "throughput", "path"])
        if kind == "latency":
            p = latency(src, dst, start, sent=100 + i, lost=rng.randrange(3))
        elif kind == "throughput":
            p = ThroughputResult(src, dst, start, rng.uniform(1, 100), i, 1448)
        else:
            p = PathMeasurement(src, dst, start, (("X", 1.0), (dst, 2.0 + i)), True, 1500)
        out.append(envelope(p, src, dst, stored=start + 10))
    return out


# Acceptance results, filled in by test_acceptance and echoed after the run.
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
