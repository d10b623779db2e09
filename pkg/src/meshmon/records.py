"""Measurement payload types and their canonical text serialisation.

The canonical form is a single line of space-separated ``key=value`` tokens
in a fixed order. Integers are plain decimals, float metrics carry exactly
three decimals (microsecond resolution for delays), and an absent value is
written as ``-``. Payload constructors round floats to three decimals so
that parse(serialize(x)) == x holds bit-for-bit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional, Tuple, Union

from .errors import ParseError

ABSENT = "-"
UNKNOWN_HOP = "*"


def r3(x):
    return None if x is None else round(float(x), 3)


def fmt_float(x):
    return ABSENT if x is None else f"{x:.3f}"


def fmt_int(x):
    return ABSENT if x is None else str(int(x))


@dataclass(frozen=True)
class LatencySample:
    src: str
    dst: str
    start_time: int
    packets_sent: int
    packets_lost: int
    delay_min: Optional[float] = None
    delay_median: Optional[float] = None
    delay_p95: Optional[float] = None

    kind = "latency"

    def __post_init__(self):
        if not 0 <= self.packets_lost <= self.packets_sent:
            raise ValueError("packets_lost must be within [0, packets_sent]")
        delays = (self.delay_min, self.delay_median, self.delay_p95)
        if self.packets_lost == self.packets_sent:
            if any(d is not None for d in delays):
                raise ValueError("delay fields must be absent when every packet is lost")
        else:
            if any(d is None for d in delays):
                raise ValueError("delay fields required when packets were delivered")
            for name in ("delay_min", "delay_median", "delay_p95"):
                object.__setattr__(self, name, r3(getattr(self, name)))
            if not self.delay_min <= self.delay_median <= self.delay_p95:
                raise ValueError("delay quantiles out of order")

    @property
    def loss_fraction(self):
        return self.packets_lost / self.packets_sent

    def fields(self):
        return [
            ("sent", fmt_int(self.packets_sent)),
            ("lost", fmt_int(self.packets_lost)),
            ("delay_min", fmt_float(self.delay_min)),
            ("delay_median", fmt_float(self.delay_median)),
            ("delay_p95", fmt_float(self.delay_p95)),
        ]


@dataclass(frozen=True)
class ThroughputResult:
    src: str
    dst: str
    start_time: int
    achieved_throughput: float
    retransmits: int
    congestion_window_final: int

    kind = "throughput"

    def __post_init__(self):
        if self.retransmits < 0:
            raise ValueError("retransmits must be >= 0")
        object.__setattr__(self, "achieved_throughput", r3(self.achieved_throughput))

    def fields(self):
        return [
            ("throughput_mbps", fmt_float(self.achieved_throughput)),
            ("retransmits", fmt_int(self.retransmits)),
            ("cwnd_bytes", fmt_int(self.congestion_window_final)),
        ]


@dataclass(frozen=True)
class PathMeasurement:
    """Traceroute result. ``hops`` holds ``(node, rtt_ms)``; an unanswered
    hop is ``("*", None)``."""

    src: str
    dst: str
    start_time: int
    hops: Tuple[Tuple[str, Optional[float]], ...]
    destination_reached: bool
    path_mtu: Optional[int] = None

    kind = "path"

    def __post_init__(self):
        hops = tuple((n, r3(rtt)) for n, rtt in self.hops)
        object.__setattr__(self, "hops", hops)
        if not hops:
            raise ValueError("a path measurement needs at least one hop")
        if self.destination_reached and hops[-1][0] != self.dst:
            raise ValueError("destination_reached requires last hop == dst")
        if self.destination_reached != (self.path_mtu is not None):
            raise ValueError("path_mtu is present iff the destination was reached")

    @property
    def hop_nodes(self):
        return [n for n, _ in self.hops]

    @property
    def complete(self):
        """Reached the destination with every hop answering."""
        return self.destination_reached and all(n != UNKNOWN_HOP for n, _ in self.hops)

    def fields(self):
        hops = ",".join(f"{n}@{fmt_float(rtt)}" for n, rtt in self.hops)
        return [
            ("reached", "1" if self.destination_reached else "0"),
            ("path_mtu", fmt_int(self.path_mtu)),
            ("hops", hops),
        ]


Payload = Union[LatencySample, ThroughputResult, PathMeasurement]
KINDS = {"latency": LatencySample, "throughput": ThroughputResult, "path": PathMeasurement}
_FIELD_KEYS = {
    "latency": ["sent", "lost", "delay_min", "delay_median", "delay_p95"],
    "throughput": ["throughput_mbps", "retransmits", "cwnd_bytes"],
    "path": ["reached", "path_mtu", "hops"],
}
HEAD_KEYS = ["kind", "src_node", "dst_node", "start"]


def payload_tokens(p):
    head = [("kind", p.kind), ("src_node", p.src), ("dst_node", p.dst),
            ("start", fmt_int(p.start_time))]
    return head + p.fields()


def serialize_payload(p):
    """Canonical one-line form; the input to :func:`dedup_key`."""
    return " ".join(f"{k}={v}" for k, v in payload_tokens(p))


def dedup_key(payload):
    """128-bit content hash (hex) of the canonical payload serialisation.

    Accepts a payload object or an already-canonical string.
    """
    text = payload if isinstance(payload, str) else serialize_payload(payload)
    return hashlib.blake2b(text.encode("utf-8"), digest_size=16).hexdigest()


def split_tokens(line, expected_keys):
    """Split ``k=v`` tokens and check they appear exactly in ``expected_keys`` order."""
    tokens = line.split(" ")
    if len(tokens) != len(expected_keys):
        raise ParseError(f"expected {len(expected_keys)} fields, got {len(tokens)}")
    out = {}
    for tok, want in zip(tokens, expected_keys):
        key, sep, value = tok.partition("=")
        if not sep or key != want:
            raise ParseError(f"expected field {want!r}, got {tok!r}", key=want)
        if value == "":
            raise ParseError(f"empty value for {want}", key=want)
        out[key] = value
    return out


def _opt(conv, value):
    return None if value == ABSENT else conv(value)


def payload_from_fields(d):
    """Build a payload from a dict of canonical string fields."""
    kind = d["kind"]
    common = dict(src=d["src_node"], dst=d["dst_node"], start_time=int(d["start"]))
    if kind == "latency":
        return LatencySample(
            packets_sent=int(d["sent"]), packets_lost=int(d["lost"]),
            delay_min=_opt(float, d["delay_min"]),
            delay_median=_opt(float, d["delay_median"]),
            delay_p95=_opt(float, d["delay_p95"]), **common)
    if kind == "throughput":
        return ThroughputResult(
            achieved_throughput=float(d["throughput_mbps"]),
            retransmits=int(d["retransmits"]),
            congestion_window_final=int(d["cwnd_bytes"]), **common)
    if kind == "path":
        hops = []
        for item in d["hops"].split(","):
            node, sep, rtt = item.rpartition("@")
            if not sep or not node:
                raise ParseError(f"bad hop {item!r}", key="hops")
            hops.append((node, _opt(float, rtt)))
        reached = {"1": True, "0": False}.get(d["reached"])
        if reached is None:
            raise ParseError("reached must be 0 or 1", key="reached")
        return PathMeasurement(hops=tuple(hops), destination_reached=reached,
                               path_mtu=_opt(int, d["path_mtu"]), **common)
    raise ParseError(f"unknown kind {kind!r}", key="kind")


def field_keys(kind):
    try:
        return HEAD_KEYS + _FIELD_KEYS[kind]
    except KeyError:
        raise ParseError(f"unknown kind {kind!r}", key="kind") from None


def parse_payload(line):
    """Inverse of :func:`serialize_payload`; strict about field order."""
    kind = line.split(" ", 1)[0].partition("=")[2]
    d = split_tokens(line, field_keys(kind))
    try:
        p = payload_from_fields(d)
    except ValueError as exc:
        raise ParseError(str(exc)) from None
    if serialize_payload(p) != line:
        raise ParseError("payload is not in canonical form")
    return p
