"""Measurement agent: latency/loss, throughput and path tests plus a local archive.

Each agent owns its random stream, so agents can run concurrently against
the same (immutable) topology without affecting each other's results.
"""

from __future__ import annotations

import logging
import math
import socketserver
import threading
from dataclasses import dataclass
from typing import Optional

from . import netsim
from .collector import AgentUnreachable, MeasurementEnvelope
from .netsim import DropReason, send_probe
from .records import UNKNOWN_HOP, LatencySample, PathMeasurement, ThroughputResult, dedup_key

log = logging.getLogger(__name__)

TOOLS = ("latency", "throughput", "trace")
TRACE_PROBE_SIZE = 60
DEFAULT_MAX_TTL = 30
DEFAULT_QUERIES = 3
# Descending ladder: jumbo sizes in 1000-byte steps, then standard sizes
# in 100-byte steps, ending at the IPv4 minimum.
MTU_CANDIDATES = tuple(range(9000, 1999, -1000)) + tuple(range(1500, 599, -100)) + (576,)


@dataclass(frozen=True)
class TestSpec:
    """A named test definition.

    Units: ``packet_interval`` in ms, ``duration`` and ``repeat_interval``
    in seconds, ``payload_size`` in bytes.
    """

    __test__ = False  # not a pytest class

    name: str
    tool: str
    repeat_interval: int
    payload_size: int = 64
    packet_count: Optional[int] = None
    packet_interval: Optional[int] = None
    duration: Optional[int] = None
    version: int = 1

    def __post_init__(self):
        if self.tool not in TOOLS:
            raise ValueError(f"spec {self.name}: unknown tool {self.tool!r}")
        latency_fields = self.packet_count is not None or self.packet_interval is not None
        if self.tool == "latency":
            if self.packet_count is None or self.packet_interval is None:
                raise ValueError(f"spec {self.name}: latency needs packet_count and packet_interval")
            if self.packet_count < 1:
                raise ValueError(f"spec {self.name}: packet_count must be >= 1")
            if self.packet_interval < 0:
                raise ValueError(f"spec {self.name}: packet_interval must be >= 0")
        elif latency_fields:
            raise ValueError(f"spec {self.name}: packet_count/packet_interval are latency-only")
        if self.tool == "throughput":
            if self.duration is None or self.duration <= 0:
                raise ValueError(f"spec {self.name}: throughput needs duration > 0")
        elif self.duration is not None:
            raise ValueError(f"spec {self.name}: duration is throughput-only")
        if self.payload_size <= 0:
            raise ValueError(f"spec {self.name}: payload_size must be > 0")
        if self.repeat_interval * 1000 <= self.length_ms:
            raise ValueError(f"spec {self.name}: repeat_interval must exceed test duration")

    @property
    def length_ms(self):
        """Simulated wall time one occurrence of the test occupies."""
        if self.tool == "latency":
            return self.packet_count * self.packet_interval
        if self.tool == "throughput":
            return self.duration * 1000
        return 0

    @property
    def repeat_ms(self):
        return self.repeat_interval * 1000


def nearest_rank(sorted_values, q):
    """Nearest-rank quantile: the ceil(q*n)-th smallest value (1-based)."""
    n = len(sorted_values)
    if n == 0:
        raise ValueError("quantile of empty sequence")
    rank = max(1, math.ceil(q * n))
    return sorted_values[rank - 1]


def run_latency_test(spec, src, dst, topo, start_time, rng):
    """One-way delay/loss stream of ``packet_count`` probes."""
    if spec.tool != "latency":
        raise ValueError("run_latency_test needs a latency spec")
    if spec.packet_count < 1:
        raise ValueError("latency test must send at least one packet")
    delays = []
    lost = 0
    for i in range(spec.packet_count):
        at = start_time + i * spec.packet_interval
        out = send_probe(topo, src, dst, spec.payload_size, 255, False, rng, at=at)
        if out.delivered:
            delays.append(out.one_way_delay)
        else:
            lost += 1
    if not delays:
        return LatencySample(src, dst, start_time, spec.packet_count, lost)
    delays.sort()
    return LatencySample(
        src, dst, start_time, spec.packet_count, lost,
        delay_min=delays[0],
        delay_median=nearest_rank(delays, 0.5),
        delay_p95=nearest_rank(delays, 0.95),
    )


def _geometric_gap(rng, p):
    """Deliveries before the next loss when each segment is lost w.p. ``p``."""
    if p >= 1.0:
        return 0
    u = 1.0 - rng.random()  # (0, 1]
    return int(math.log(u) / math.log1p(-p))


def run_throughput_test(spec, src, dst, topo, start_time, rng):
    """Fluid-model TCP memory-to-memory test.

    The bottleneck bandwidth and per-link loss are sampled at
    ``start_time`` and held for the test. The test sends
    ``N = floor(bottleneck * duration / segment_bits)`` segments; each is
    lost end to end with ``p = 1 - prod(1 - loss_l)``. Dropped segments are
    retransmits and ``achieved = bottleneck * (N - drops) / N``.

    Congestion window (segments): starts at 1, +1 per delivered segment up
    to the bandwidth-delay product, halved (floor 1) per loss.
    """
    if spec.tool != "throughput":
        raise ValueError("run_throughput_test needs a throughput spec")
    if not spec.duration or spec.duration <= 0:
        raise ValueError("throughput duration must be > 0")
    route = netsim.route_lookup(topo, src, dst, start_time)
    links = topo.route_links_at(route, start_time)
    bottleneck = min(l.bandwidth for l in links)
    p_loss = 1.0 - netsim.delivery_probability(topo, route, start_time)
    seg_bits = spec.payload_size * 8
    n_segments = int(bottleneck * 1e6 * spec.duration // seg_bits)
    if n_segments < 1:
        raise ValueError("payload too large to send a single segment in the test duration")
    rtt_s = 2.0 * sum(l.base_latency for l in links) / 1000.0
    cap = max(1, math.ceil(bottleneck * 1e6 * rtt_s / seg_bits))

    cwnd = 1
    drops = 0
    sent = 0
    while sent < n_segments:
        gap = n_segments - sent if p_loss <= 0.0 else _geometric_gap(rng, p_loss)
        delivered = min(gap, n_segments - sent)
        cwnd = min(cap, cwnd + delivered)
        sent += delivered
        if sent < n_segments:
            drops += 1
            sent += 1
            cwnd = max(1, cwnd // 2)
    achieved = bottleneck * (n_segments - drops) / n_segments
    return ThroughputResult(src, dst, start_time, achieved, drops, cwnd * spec.payload_size)


def run_path_trace(src, dst, topo, start_time, rng, max_ttl=DEFAULT_MAX_TTL,
                   queries=DEFAULT_QUERIES):
    """Tracepath-style hop discovery followed by a path-MTU ladder.

    Each TTL gets up to ``queries`` attempts; an all-lost TTL records
    ``("*", None)``. Once the destination answers, don't-fragment probes
    walk :data:`MTU_CANDIDATES` downwards and the first delivered size is
    the path MTU. A candidate is abandoned on an MTU rejection or after
    ``queries`` random losses. If the ladder is exhausted by loss alone the
    576-byte minimum every path must carry is reported.
    """
    if max_ttl < 1:
        raise ValueError("max_ttl must be >= 1")
    netsim.route_lookup(topo, src, dst, start_time)
    hops = []
    reached = False
    for ttl in range(1, max_ttl + 1):
        hop = (UNKNOWN_HOP, None)
        for _ in range(queries):
            out = send_probe(topo, src, dst, TRACE_PROBE_SIZE, ttl, False, rng, at=start_time)
            if out.drop_reason is not DropReason.RANDOM_LOSS:
                hop = (out.reply_from, 2.0 * out.elapsed)
                break
        hops.append(hop)
        if hop[0] == dst:
            reached = True
            break
    if not reached:
        return PathMeasurement(src, dst, start_time, tuple(hops), False)

    path_mtu = netsim.MIN_MTU
    for size in MTU_CANDIDATES:
        accepted = False
        for _ in range(queries):
            out = send_probe(topo, src, dst, size, 255, True, rng, at=start_time)
            if out.delivered:
                accepted = True
            if out.drop_reason is not DropReason.RANDOM_LOSS:
                break
        if accepted:
            path_mtu = size
            break
    return PathMeasurement(src, dst, start_time, tuple(hops), True, path_mtu)


@dataclass(frozen=True)
class ArchiveRecord:
    record_id: str
    payload: object
    stored_at: int


class Archive:
    """Append-only local measurement archive, idempotent on payload content."""

    def __init__(self):
        self._lock = threading.Lock()
        self._records = []
        self._by_id = {}

    def __len__(self):
        with self._lock:
            return len(self._records)

    def store(self, payload, stored_at):
        rid = dedup_key(payload)
        with self._lock:
            existing = self._by_id.get(rid)
            if existing is not None:
                return existing
            rec = ArchiveRecord(rid, payload, int(stored_at))
            self._records.append(rec)
            self._by_id[rid] = rec
            return rec

    def list_since(self, t):
        if t < 0:
            raise ValueError("list_since needs t >= 0")
        with self._lock:
            return [r for r in self._records if r.stored_at >= t]

    def latest_stored_at(self):
        with self._lock:
            return max((r.stored_at for r in self._records), default=None)


class ThroughputBusyError(RuntimeError):
    """Two throughput tests overlapped on one agent."""


class Agent:
    """One measurement host bound to a simulated node.

    ``hosts_by_node`` maps simulated node ids to host ids so archived
    results can be served as envelopes addressed by host.
    """

    def __init__(self, host, node, topo, hosts_by_node=None, rng=None):
        self.host = host
        self.node = node
        self.topo = topo
        self.hosts_by_node = dict(hosts_by_node or {node: host})
        self.rng = rng if rng is not None else netsim.make_rng(topo, f"agent/{host}")
        self.archive = Archive()
        self._busy = []
        self._busy_lock = threading.Lock()

    def reserve_throughput(self, start, end):
        with self._busy_lock:
            self._busy = [(a, b) for a, b in self._busy if b > start]
            for a, b in self._busy:
                if a < end and start < b:
                    raise ThroughputBusyError(
                        f"agent {self.host}: throughput [{start},{end}) overlaps [{a},{b})")
            self._busy.append((start, end))

    def execute(self, spec, dst_node, at, peer=None):
        """Run one occurrence of ``spec`` towards ``dst_node`` starting at ``at``."""
        if spec.tool == "latency":
            return run_latency_test(spec, self.node, dst_node, self.topo, at, self.rng)
        if spec.tool == "throughput":
            end = at + spec.length_ms
            self.reserve_throughput(at, end)
            if peer is not None:
                peer.reserve_throughput(at, end)
            return run_throughput_test(spec, self.node, dst_node, self.topo, at, self.rng)
        return run_path_trace(self.node, dst_node, self.topo, at, self.rng)

    def envelope_for(self, rec, collected_at=None):
        p = rec.payload
        return MeasurementEnvelope(
            envelope_id=rec.record_id,
            src=self.hosts_by_node.get(p.src, p.src),
            dst=self.hosts_by_node.get(p.dst, p.dst),
            agent=self.host,
            stored_at=rec.stored_at,
            collected_at=rec.stored_at if collected_at is None else collected_at,
            payload=p,
        )

    def list_since_lines(self, t):
        return [self.envelope_for(r).to_line() for r in self.archive.list_since(t)]

    def health_line(self):
        latest = self.archive.latest_stored_at()
        return f"ok latest={'-' if latest is None else latest} count={len(self.archive)}"

    def handle_request(self, line):
        """Answer one protocol request; returns response lines.

        ``list_since <int>`` yields envelope lines followed by ``end <n>``;
        ``health`` yields one ``ok ...`` line; anything else one ``error`` line.
        """
        words = line.strip().split()
        if words == ["health"]:
            return [self.health_line()]
        if len(words) == 2 and words[0] == "list_since":
            try:
                t = int(words[1])
                if t < 0:
                    raise ValueError
            except ValueError:
                return [f"error bad timestamp {words[1]!r}"]
            lines = self.list_since_lines(t)
            return lines + [f"end {len(lines)}"]
        return [f"error unknown request {line.strip()[:60]!r}"]


class LocalEndpoint:
    """In-process endpoint with the same surface as :class:`AgentClient`."""

    def __init__(self, agent):
        self.agent = agent
        self.up = True

    @property
    def host(self):
        return self.agent.host

    def _check(self):
        if not self.up:
            raise AgentUnreachable(self.agent.host)

    def list_since(self, t):
        self._check()
        return self.agent.list_since_lines(t)

    def health(self):
        self._check()
        return self.agent.health_line()


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        agent = self.server.agent
        for raw in self.rfile:
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError:
                line = "<undecodable>"
            for out in agent.handle_request(line):
                self.wfile.write(out.encode("utf-8") + b"\n")
            self.wfile.flush()


class AgentServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, agent, address):
        self.agent = agent
        super().__init__(address, _Handler)
        self._thread = None

    def start(self):
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.shutdown()
        self.server_close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def serve_api(agent, address=("127.0.0.1", 0)):
    """Start a background TCP server for ``agent``; ``server.server_address`` has the port."""
    return AgentServer(agent, address).start()


class AgentClient:
    """Line-protocol client for a remote agent; keeps one connection open."""

    def __init__(self, address, host=None, timeout=5.0):
        self.address = tuple(address)
        self.host = host or f"{self.address[0]}:{self.address[1]}"
        self.timeout = timeout
        self._sock = None
        self._rfile = None

    def _connect(self):
        import socket

        if self._sock is None:
            try:
                self._sock = socket.create_connection(self.address, timeout=self.timeout)
            except OSError as exc:
                raise AgentUnreachable(self.host, exc) from exc
            self._rfile = self._sock.makefile("rb")

    def close(self):
        if self._sock is not None:
            self._rfile.close()
            self._sock.close()
            self._sock = self._rfile = None

    def request(self, line):
        """Send one request line and return the first response line."""
        self._connect()
        try:
            self._sock.sendall(line.encode("utf-8") + b"\n")
            resp = self._rfile.readline()
        except OSError as exc:
            self.close()
            raise AgentUnreachable(self.host, exc) from exc
        if not resp:
            self.close()
            raise AgentUnreachable(self.host, "connection closed")
        return resp.decode("utf-8").rstrip("\n")

    def _read_line(self):
        try:
            resp = self._rfile.readline()
        except OSError as exc:
            self.close()
            raise AgentUnreachable(self.host, exc) from exc
        if not resp:
            self.close()
            raise AgentUnreachable(self.host, "connection closed")
        return resp.decode("utf-8").rstrip("\n")

    def list_since(self, t):
        first = self.request(f"list_since {int(t)}")
        lines = []
        line = first
        while not line.startswith("end "):
            if line.startswith("error "):
                raise AgentUnreachable(self.host, line)
            lines.append(line)
            line = self._read_line()
        return lines

    def health(self):
        return self.request("health")
