"""Seeded multi-hop network simulator.

Every active measurement in meshmon is reduced to :func:`send_probe` calls
against a :class:`TopologySpec`. Topologies are immutable; fault injection
(route changes, link degradation) returns a new topology carrying a
time-indexed list of overrides, so lookups take a simulated timestamp.

Time is integer simulated milliseconds. Delays are float milliseconds.
"""

from __future__ import annotations

import dataclasses
import random
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional

import networkx as nx

from .errors import MeshmonError, ParseError, ValidationError

__all__ = [
    "DropReason",
    "LinkSpec",
    "NoRouteError",
    "ProbeOutcome",
    "TopologySpec",
    "UnknownLinkError",
    "build_topology",
    "format_topology",
    "inject_link_change",
    "inject_link_degradation",
    "inject_route_change",
    "load_topology",
    "make_rng",
    "route_lookup",
    "send_probe",
]

MIN_MTU = 576
NODE_ID_RE = re.compile(r"^[A-Za-z0-9_.:\-]+$")


class NoRouteError(MeshmonError, LookupError):
    """No route is configured for the requested (src, dst) pair."""

    def __init__(self, src, dst, reason="no route configured"):
        self.src = src
        self.dst = dst
        super().__init__(f"{reason}: ({src},{dst})")


class UnknownLinkError(MeshmonError, LookupError):
    def __init__(self, link):
        self.link = tuple(link)
        super().__init__(f"unknown link {self.link[0]}->{self.link[1]}")


class DropReason(str, Enum):
    NONE = "none"
    RANDOM_LOSS = "random_loss"
    MTU_EXCEEDED = "mtu_exceeded"
    TTL_EXPIRED = "ttl_expired"


@dataclass(frozen=True)
class LinkSpec:
    """One direction of a link. The reverse direction is a separate LinkSpec."""

    from_node: str
    to_node: str
    base_latency: float
    jitter_max: float = 0.0
    loss_prob: float = 0.0
    bandwidth: float = 1000.0
    mtu: int = 1500

    def __post_init__(self):
        name = f"{self.from_node}->{self.to_node}"
        if self.from_node == self.to_node:
            raise ValidationError(f"link {name}: self-loop")
        if not self.base_latency >= 0:
            raise ValidationError(f"link {name}: latency must be >= 0")
        if not self.jitter_max >= 0:
            raise ValidationError(f"link {name}: jitter must be >= 0")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValidationError(f"link {name}: loss must be in [0,1]")
        if not self.bandwidth > 0:
            raise ValidationError(f"link {name}: bandwidth must be > 0")
        if int(self.mtu) != self.mtu or self.mtu < MIN_MTU:
            raise ValidationError(f"link {name}: mtu must be an integer >= {MIN_MTU}")

    @property
    def key(self):
        return (self.from_node, self.to_node)


@dataclass(frozen=True)
class ProbeOutcome:
    """Result of a single probe.

    ``reply_from`` and ``elapsed`` identify where the probe stopped and the
    one-way delay accumulated up to that point; traceroute uses them for
    TTL-expired probes, where ``one_way_delay`` is absent.
    """

    delivered: bool
    one_way_delay: Optional[float]
    hop_count: int
    drop_reason: DropReason = DropReason.NONE
    fragmentation_needed_at: Optional[str] = None
    reply_from: Optional[str] = None
    elapsed: float = 0.0


@dataclass(frozen=True, eq=False)
class TopologySpec:
    """Immutable simulated network.

    ``links`` and ``routes`` describe the state at scenario start. Injected
    changes live in ``route_events`` / ``link_events`` as
    ``(at_time, seq, value)`` tuples sorted by ``(at_time, seq)``; the later
    seq wins on equal times.
    """

    nodes: frozenset
    links: Mapping[tuple, LinkSpec]
    routes: Mapping[tuple, tuple]
    seed: int = 0
    route_events: Mapping[tuple, tuple] = field(default_factory=dict)
    link_events: Mapping[tuple, tuple] = field(default_factory=dict)
    _seq: int = 0

    def link_at(self, a, b, at=0):
        """Link state for ``a->b`` at simulated time ``at``."""
        try:
            base = self.links[(a, b)]
        except KeyError:
            raise UnknownLinkError((a, b)) from None
        events = self.link_events.get((a, b))
        if not events:
            return base
        changes = {}
        for t, _seq, delta in events:
            if t > at:
                break
            changes.update(delta)
        return dataclasses.replace(base, **changes) if changes else base

    def route_at(self, src, dst, at=0):
        route = self.routes.get((src, dst))
        for t, _seq, r in self.route_events.get((src, dst), ()):
            if t > at:
                break
            route = r
        if route is None:
            raise NoRouteError(src, dst)
        return route

    def route_links_at(self, route, at=0):
        return [self.link_at(a, b, at) for a, b in zip(route, route[1:])]

    def epochs(self, src, dst):
        """Change times for a pair's route, including the implicit start epoch."""
        return [0] + [t for t, _s, _r in self.route_events.get((src, dst), ())]


def make_rng(topo, stream=""):
    """Per-caller generator derived from the topology seed.

    String seeds go through SHA-512 inside :mod:`random`, so the stream is
    stable across processes regardless of hash randomisation.
    """
    return random.Random(f"{topo.seed}/{stream}")


def _check_node_id(node, lineno=None):
    if not NODE_ID_RE.match(node):
        raise ParseError(f"invalid node id {node!r}", lineno)


def _validate_route(nodes, links, src, dst, route):
    route = tuple(route)
    label = f"route ({src},{dst})"
    if len(route) < 2:
        raise ValidationError(f"{label}: needs at least two nodes")
    if route[0] != src or route[-1] != dst:
        raise ValidationError(f"{label}: must start at {src} and end at {dst}")
    if len(set(route)) != len(route):
        raise ValidationError(f"{label}: repeated node in {list(route)}")
    for n in route:
        if n not in nodes:
            raise ValidationError(f"{label}: unknown node {n}")
    for a, b in zip(route, route[1:]):
        if (a, b) not in links:
            raise ValidationError(f"{label}: missing link {a}->{b}")
    return route


def _validate(topo):
    if not topo.nodes:
        raise ValidationError("topology has no nodes")
    for (a, b), link in topo.links.items():
        for n in (a, b):
            if n not in topo.nodes:
                raise ValidationError(f"link {a}->{b}: unknown node {n}")
    for (src, dst), route in topo.routes.items():
        _validate_route(topo.nodes, topo.links, src, dst, route)
    if not 0 <= topo.seed < 2**64:
        raise ValidationError("seed must be a 64-bit unsigned integer")
    return topo


def auto_routes(nodes, links, existing=None):
    """Shortest-latency routes for every ordered pair lacking one."""
    g = nx.DiGraph()
    g.add_nodes_from(sorted(nodes))
    for (a, b), link in sorted(links.items()):
        g.add_edge(a, b, weight=link.base_latency)
    routes = dict(existing or {})
    for src in sorted(nodes):
        paths = nx.single_source_dijkstra_path(g, src, weight="weight")
        for dst in sorted(paths):
            if dst != src and (src, dst) not in routes:
                routes[(src, dst)] = tuple(paths[dst])
    return routes


_LINK_KEYS = {
    "latency_ms": ("base_latency", float),
    "jitter_ms": ("jitter_max", float),
    "loss": ("loss_prob", float),
    "bandwidth_mbps": ("bandwidth", float),
    "mtu": ("mtu", int),
}


def _parse_link_args(tokens, lineno):
    kwargs = {}
    for tok in tokens:
        key, sep, value = tok.partition("=")
        if not sep or key not in _LINK_KEYS:
            raise ParseError(f"bad link attribute {tok!r}", lineno, key)
        name, conv = _LINK_KEYS[key]
        try:
            kwargs[name] = conv(value)
        except ValueError:
            raise ParseError(f"bad value for {key}: {value!r}", lineno, key) from None
    for required in ("latency_ms", "bandwidth_mbps"):
        if _LINK_KEYS[required][0] not in kwargs:
            raise ParseError(f"link missing {required}", lineno, required)
    return kwargs


def build_topology(text):
    """Parse and validate a topology document.

    Grammar (one directive per line, ``#`` starts a comment)::

        seed <uint64>
        node <id> [<id> ...]
        link <from> <to> latency_ms=<f> bandwidth_mbps=<f> [jitter_ms=<f>] [loss=<f>] [mtu=<int>]
        duplex <a> <b> <same attributes as link>
        route <src> <hop> ... <dst>
        autoroute

    ``duplex`` declares both directions with identical attributes.
    ``autoroute`` fills every ordered pair without an explicit route with
    the minimum-latency path.
    """
    nodes = []
    links = {}
    routes = {}
    seed = 0
    auto = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        head, args = words[0], words[1:]
        if head == "seed":
            if len(args) != 1 or not args[0].isdigit():
                raise ParseError("seed takes one unsigned integer", lineno)
            seed = int(args[0])
        elif head == "node":
            if not args:
                raise ParseError("node needs at least one id", lineno)
            for n in args:
                _check_node_id(n, lineno)
                if n in nodes:
                    raise ParseError(f"duplicate node {n}", lineno)
                nodes.append(n)
        elif head in ("link", "duplex"):
            if len(args) < 2:
                raise ParseError(f"{head} needs two endpoints", lineno)
            a, b = args[0], args[1]
            kwargs = _parse_link_args(args[2:], lineno)
            pairs = [(a, b), (b, a)] if head == "duplex" else [(a, b)]
            for x, y in pairs:
                if (x, y) in links:
                    raise ParseError(f"duplicate link {x}->{y}", lineno)
                try:
                    links[(x, y)] = LinkSpec(x, y, **kwargs)
                except ValidationError as exc:
                    raise ParseError(str(exc), lineno) from None
        elif head == "route":
            if len(args) < 2:
                raise ParseError("route needs at least two nodes", lineno)
            key = (args[0], args[-1])
            if key in routes:
                raise ParseError(f"duplicate route ({key[0]},{key[1]})", lineno)
            routes[key] = tuple(args)
        elif head == "autoroute":
            auto = True
        else:
            raise ParseError(f"unknown directive {head!r}", lineno)

    node_set = frozenset(nodes)
    topo = TopologySpec(nodes=node_set, links=links, routes=routes, seed=seed)
    _validate(topo)
    if auto:
        topo = dataclasses.replace(topo, routes=auto_routes(node_set, links, routes))
    return topo


def load_topology(path):
    with open(path, encoding="utf-8") as fh:
        return build_topology(fh.read())


def _fmt_num(x):
    return repr(float(x)) if int(x) != x else str(int(x))


def format_topology(topo):
    """Serialise the start-of-scenario state back into the document grammar."""
    out = [f"seed {topo.seed}", "node " + " ".join(sorted(topo.nodes))]
    for key in sorted(topo.links):
        l = topo.links[key]
        out.append(
            f"link {l.from_node} {l.to_node} latency_ms={_fmt_num(l.base_latency)} "
            f"jitter_ms={_fmt_num(l.jitter_max)} loss={_fmt_num(l.loss_prob)} "
            f"bandwidth_mbps={_fmt_num(l.bandwidth)} mtu={l.mtu}"
        )
    for key in sorted(topo.routes):
        out.append("route " + " ".join(topo.routes[key]))
    return "\n".join(out) + "\n"


def route_lookup(topo, src, dst, at=0):
    """Configured route for ``(src, dst)`` at simulated time ``at``."""
    for n in (src, dst):
        if n not in topo.nodes:
            raise NoRouteError(src, dst, f"unknown node {n}")
    if src == dst:
        raise NoRouteError(src, dst, "source equals destination")
    return list(topo.route_at(src, dst, at))


def send_probe(topo, src, dst, size, ttl, dont_fragment, rng, at=0):
    """Send one probe along the route active at ``at``.

    Per link, in order: MTU check (dont_fragment only), independent
    Bernoulli loss, then delay of ``base_latency + U(0, jitter_max)``.
    A TTL of ``k`` expires at the k-th node after ``src`` unless that node
    is the destination.
    """
    if size <= 0:
        raise ValueError("probe size must be positive")
    if ttl < 1:
        raise ValueError("ttl must be >= 1")
    route = route_lookup(topo, src, dst, at)
    delay = 0.0
    for hop, (a, b) in enumerate(zip(route, route[1:]), start=1):
        link = topo.link_at(a, b, at)
        if dont_fragment and size > link.mtu:
            return ProbeOutcome(False, None, hop - 1, DropReason.MTU_EXCEEDED,
                                fragmentation_needed_at=a, reply_from=a, elapsed=delay)
        if link.loss_prob > 0.0 and rng.random() < link.loss_prob:
            return ProbeOutcome(False, None, hop - 1, DropReason.RANDOM_LOSS, elapsed=delay)
        delay += link.base_latency
        if link.jitter_max > 0.0:
            delay += rng.uniform(0.0, link.jitter_max)
        if b == dst:
            return ProbeOutcome(True, delay, hop, reply_from=b, elapsed=delay)
        if hop == ttl:
            return ProbeOutcome(False, None, hop, DropReason.TTL_EXPIRED,
                                reply_from=b, elapsed=delay)
    raise AssertionError("route does not end at destination")  # pragma: no cover


def _next_seq(topo):
    return topo._seq + 1


def inject_route_change(topo, src, dst, new_route, at_time):
    """Return a topology whose (src, dst) route is ``new_route`` from ``at_time`` on."""
    route = _validate_route(topo.nodes, topo.links, src, dst, new_route)
    seq = _next_seq(topo)
    events = dict(topo.route_events)
    entries = list(events.get((src, dst), ())) + [(int(at_time), seq, route)]
    events[(src, dst)] = tuple(sorted(entries, key=lambda e: (e[0], e[1])))
    return dataclasses.replace(topo, route_events=events, _seq=seq)


_MUTABLE_LINK_FIELDS = {"base_latency", "jitter_max", "loss_prob", "bandwidth", "mtu"}


def inject_link_change(topo, link, at_time, **changes):
    """Override link attributes from ``at_time`` on (e.g. ``bandwidth=10``)."""
    key = tuple(link)
    if key not in topo.links:
        raise UnknownLinkError(key)
    bad = set(changes) - _MUTABLE_LINK_FIELDS
    if bad:
        raise ValueError(f"cannot change link fields {sorted(bad)}")
    # Validate the merged state eagerly so bad values fail at injection time.
    dataclasses.replace(topo.links[key], **changes)
    seq = _next_seq(topo)
    events = dict(topo.link_events)
    entries = list(events.get(key, ())) + [(int(at_time), seq, dict(changes))]
    events[key] = tuple(sorted(entries, key=lambda e: (e[0], e[1])))
    return dataclasses.replace(topo, link_events=events, _seq=seq)


def inject_link_degradation(topo, link, loss_prob, at_time):
    """Set a link's loss probability from ``at_time`` on."""
    return inject_link_change(topo, link, at_time, loss_prob=loss_prob)


def min_route_mtu(topo, route, at=0):
    return min(l.mtu for l in topo.route_links_at(route, at))


def bottleneck_bandwidth(topo, route, at=0):
    return min(l.bandwidth for l in topo.route_links_at(route, at))


def delivery_probability(topo, route, at=0):
    p = 1.0
    for l in topo.route_links_at(route, at):
        p *= 1.0 - l.loss_prob
    return p
