"""Central mesh configuration and test scheduling.

Configuration documents are YAML with three top-level lists::

    hosts:
      - {id: ps-a, node: A, site: CERN, segment: LHCOPN, lat: 46.23, lon: 6.05}
    specs:
      - {name: owamp, tool: latency, packet_count: 100, packet_interval_ms: 10,
         payload_size: 64, repeat_interval_s: 300}
      - {name: bwctl, tool: throughput, duration_s: 10, payload_size: 1448,
         repeat_interval_s: 3600}
      - {name: trace, tool: trace, repeat_interval_s: 600}
    meshes:
      - {name: opn, members: [ps-a, ps-b], specs: [owamp, bwctl], kind: full_mesh}
      - {name: extra, members: [ps-a, ps-c], specs: [trace], kind: disjoint,
         pairs: [[ps-a, ps-c]]}

Schedule times are integer milliseconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import reduce

import yaml

from .agent import TestSpec
from .errors import ConfigError, ParseError, ValidationError

SEGMENTS = ("LHCOPN", "LHCONE", "other")


class InfeasibleSchedule(ConfigError):
    """Throughput demand cannot be placed without a host overlap."""


@dataclass(frozen=True)
class HostRecord:
    host_id: str
    node: str
    site: str = ""
    net_segment: str = "other"
    latitude: float = 0.0
    longitude: float = 0.0


@dataclass(frozen=True)
class MeshDefinition:
    name: str
    members: tuple
    specs: tuple
    topology_kind: str = "full_mesh"
    pairs: tuple = ()

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValidationError(f"mesh {self.name}: needs at least two members")
        if self.topology_kind not in ("full_mesh", "disjoint"):
            raise ValidationError(f"mesh {self.name}: unknown kind {self.topology_kind!r}")


@dataclass(frozen=True)
class MeshConfig:
    hosts: dict
    meshes: tuple
    specs: dict

    def node_of(self, host_id):
        return self.hosts[host_id].node

    @property
    def hosts_by_node(self):
        return {h.node: h.host_id for h in self.hosts.values()}


@dataclass(frozen=True)
class ScheduleEntry:
    src: str
    dst: str
    spec: TestSpec
    first_start: int
    repeat_interval: int

    def occurrences(self, t0, t1):
        """Occurrence times in ``[t0, t1)``."""
        p = self.repeat_interval
        k = max(0, -(-(t0 - self.first_start) // p))
        t = self.first_start + k * p
        out = []
        while t < t1:
            out.append(t)
            t += p
        return out


_SPEC_KEYS = {
    "name": "name", "tool": "tool", "repeat_interval_s": "repeat_interval",
    "payload_size": "payload_size", "packet_count": "packet_count",
    "packet_interval_ms": "packet_interval", "duration_s": "duration",
    "version": "version",
}


def _spec_from_dict(d):
    unknown = set(d) - set(_SPEC_KEYS)
    if unknown:
        raise ValidationError(f"spec {d.get('name')}: unknown keys {sorted(unknown)}")
    try:
        return TestSpec(**{_SPEC_KEYS[k]: v for k, v in d.items()})
    except TypeError as exc:
        raise ValidationError(f"spec {d.get('name')}: {exc}") from None
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def _host_from_dict(d):
    try:
        return HostRecord(
            host_id=str(d["id"]), node=str(d["node"]), site=str(d.get("site", "")),
            net_segment=str(d.get("segment", "other")),
            latitude=float(d.get("lat", 0.0)), longitude=float(d.get("lon", 0.0)),
        )
    except KeyError as exc:
        raise ValidationError(f"host entry missing {exc.args[0]}: {d}") from None


def parse_config(text):
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ParseError(f"YAML error: {exc}", mark.line + 1 if mark else None) from None
    if not isinstance(doc, dict):
        raise ParseError("mesh config must be a mapping with hosts/specs/meshes")
    return doc


def validate_config(document, topology=None):
    """Parse (if text) and check a mesh configuration.

    Checks: unique host ids, every mesh member a declared host, every spec
    reference resolvable, disjoint pairs drawn from members, and, when a
    topology is given, every host node present in it.
    """
    doc = parse_config(document) if isinstance(document, str) else document
    hosts = {}
    for d in doc.get("hosts") or []:
        h = _host_from_dict(d)
        if h.host_id in hosts:
            raise ValidationError(f"duplicate host id {h.host_id}")
        if h.net_segment not in SEGMENTS:
            raise ValidationError(f"host {h.host_id}: unknown segment {h.net_segment!r}")
        if topology is not None and h.node not in topology.nodes:
            raise ValidationError(f"host {h.host_id}: node {h.node} not in topology")
        hosts[h.host_id] = h
    nodes = [h.node for h in hosts.values()]
    if len(set(nodes)) != len(nodes):
        raise ValidationError("two hosts are bound to the same node")

    specs = {}
    for d in doc.get("specs") or []:
        s = _spec_from_dict(d)
        if s.name in specs:
            raise ValidationError(f"duplicate spec name {s.name}")
        specs[s.name] = s

    meshes = []
    for d in doc.get("meshes") or []:
        name = d.get("name", "?")
        members = tuple(str(m) for m in d.get("members") or ())
        for m in members:
            if m not in hosts:
                raise ValidationError(f"mesh {name}: unknown host {m}")
        spec_refs = tuple(d.get("specs") or ())
        for s in spec_refs:
            if s not in specs:
                raise ValidationError(f"mesh {name}: unknown spec {s}")
        pairs = tuple(tuple(p) for p in d.get("pairs") or ())
        for a, b in pairs:
            for m in (a, b):
                if m not in members:
                    raise ValidationError(f"mesh {name}: pair member {m} not in mesh")
        meshes.append(MeshDefinition(name, members, spec_refs, d.get("kind", "full_mesh"), pairs))
    return MeshConfig(hosts, tuple(meshes), specs)


def load_config(path, topology=None):
    with open(path, encoding="utf-8") as fh:
        return validate_config(fh.read(), topology)


def expand_mesh(mesh):
    """Ordered (src, dst) pairs the mesh tests; both directions for full meshes."""
    if mesh.topology_kind == "disjoint":
        return list(mesh.pairs)
    return [(a, b) for a in mesh.members for b in mesh.members if a != b]


def config_tasks(cfg):
    """Distinct (src, dst, spec) demands across all meshes, in config order."""
    seen = set()
    tasks = []
    for mesh in cfg.meshes:
        for spec_name in mesh.specs:
            for src, dst in expand_mesh(mesh):
                key = (src, dst, spec_name)
                if key not in seen:
                    seen.add(key)
                    tasks.append((src, dst, cfg.specs[spec_name]))
    return tasks


def _periodic_conflict(o1, d1, p1, o2, d2, p2):
    """Whether two periodic interval trains ever overlap.

    Occurrence differences form ``(o1 - o2) + gcd(p1, p2) * Z``; intervals
    ``[a, a+d1)`` and ``[b, b+d2)`` overlap iff ``a - b`` lies in ``(-d1, d2)``.
    """
    g = math.gcd(p1, p2)
    r = (o1 - o2) % g
    return r < d2 or r > g - d1


def _check_utilisation(tasks):
    load = {}
    for src, dst, spec in tasks:
        share = Fraction(spec.length_ms, spec.repeat_ms)
        for h in (src, dst):
            load[h] = load.get(h, 0) + share
    for h in sorted(load):
        if load[h] > 1:
            raise InfeasibleSchedule(
                f"host {h}: throughput busy time {float(load[h]):.2f}x its repeat interval")


def build_schedule_tasks(tasks):
    """Schedule explicit (src, dst, spec) demands; see :func:`build_schedule`."""
    entries = []
    by_spec = {}
    for src, dst, spec in tasks:
        by_spec.setdefault(spec.name, []).append((src, dst, spec))

    for name, group in by_spec.items():
        spec = group[0][2]
        if spec.tool == "throughput":
            continue
        n = len(group)
        for idx, (src, dst, _) in enumerate(group):
            entries.append(ScheduleEntry(src, dst, spec, idx * spec.repeat_ms // n, spec.repeat_ms))

    tput = sorted((t for t in tasks if t[2].tool == "throughput"),
                  key=lambda t: (t[0], t[1], t[2].name))
    if tput:
        _check_utilisation(tput)
        step = reduce(math.gcd, [t[2].length_ms for t in tput] + [t[2].repeat_ms for t in tput])
        placed = []  # (src, dst, offset, length, period)
        for src, dst, spec in tput:
            d, p = spec.length_ms, spec.repeat_ms
            rivals = [x for x in placed if {x[0], x[1]} & {src, dst}]
            for offset in range(0, p, step):
                if not any(_periodic_conflict(offset, d, p, o, dd, pp) for _, _, o, dd, pp in rivals):
                    break
            else:
                raise InfeasibleSchedule(f"no conflict-free slot for {spec.name} {src}->{dst}")
            placed.append((src, dst, offset, d, p))
            entries.append(ScheduleEntry(src, dst, spec, offset, p))

    order = {(s, d, sp.name): i for i, (s, d, sp) in enumerate(tasks)}
    entries.sort(key=lambda e: order[(e.src, e.dst, e.spec.name)])
    return entries


def build_schedule(pairs, specs):
    """Schedule every spec on every pair.

    Latency and trace tests start at ``pair_index * repeat // pair_count``.
    Throughput tests are placed greedily (first fit, pairs in lexical order)
    at the earliest offset where no host takes part in two overlapping
    throughput occurrences, ever. Output is a pure function of input order.
    """
    return build_schedule_tasks([(s, d, spec) for spec in specs for s, d in pairs])


def schedule_for_config(cfg):
    return build_schedule_tasks(config_tasks(cfg))


def hyperperiod(schedule):
    return reduce(lambda a, b: a * b // math.gcd(a, b), (e.repeat_interval for e in schedule), 1)


def next_due(schedule, now, horizon):
    """``(entry, time)`` pairs with an occurrence in ``[now, now + horizon)``, time-ordered."""
    if horizon <= 0:
        raise ValueError("horizon must be > 0")
    due = []
    for idx, e in enumerate(schedule):
        for t in e.occurrences(now, now + horizon):
            due.append((t, idx, e))
    due.sort(key=lambda x: (x[0], x[1]))
    return [(e, t) for t, _, e in due]
