"""Collector: envelopes, agent polling and an in-process topic bus.

Delivery is at-least-once end to end. Polls overlap on the cursor boundary
and bus subscribers replay from their last acknowledged offset after a
restart; sinks deduplicate on the envelope id.

Envelope wire format (one line, fixed field order)::

    id=<32 hex> src=<host> dst=<host> agent=<host> stored=<ms> collected=<ms> <payload>

where ``<payload>`` is the canonical payload serialisation from
:mod:`meshmon.records` and ``id`` is its :func:`dedup_key`.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, replace
from .errors import MeshmonError, ParseError
from .records import (
    Payload,
    dedup_key,
    field_keys,
    payload_from_fields,
    serialize_payload,
    split_tokens,
)

log = logging.getLogger(__name__)

ENVELOPE_KEYS = ["id", "src", "dst", "agent", "stored", "collected"]
TOPICS = ("latency", "throughput", "path")
DEFAULT_POLL_PERIOD_MS = 60_000


class AgentUnreachable(MeshmonError, ConnectionError):
    def __init__(self, host, cause=None):
        self.host = host
        self.cause = cause
        super().__init__(f"agent {host} unreachable" + (f": {cause}" if cause else ""))


class BusStopped(MeshmonError, RuntimeError):
    """Publish or subscribe on a bus that has been stopped."""


@dataclass(frozen=True)
class MeasurementEnvelope:
    envelope_id: str
    src: str
    dst: str
    agent: str
    stored_at: int
    collected_at: int
    payload: Payload

    @property
    def metric_kind(self):
        return self.payload.kind

    @property
    def start_time(self):
        return self.payload.start_time

    def to_line(self):
        head = (f"id={self.envelope_id} src={self.src} dst={self.dst} agent={self.agent} "
                f"stored={self.stored_at} collected={self.collected_at}")
        return head + " " + serialize_payload(self.payload)

    @classmethod
    def from_line(cls, line):
        """Parse a wire line, rejecting anything not bit-identical to its re-serialisation."""
        line = line.rstrip("\n")
        tokens = line.split(" ")
        if len(tokens) <= len(ENVELOPE_KEYS):
            raise ParseError("truncated envelope")
        kind = tokens[len(ENVELOPE_KEYS)].partition("=")[2]
        d = split_tokens(line, ENVELOPE_KEYS + field_keys(kind))
        try:
            payload = payload_from_fields(d)
            env = cls(d["id"], d["src"], d["dst"], d["agent"], int(d["stored"]),
                      int(d["collected"]), payload)
        except ValueError as exc:
            raise ParseError(str(exc)) from None
        if env.to_line() != line:
            raise ParseError("envelope is not in canonical form")
        if env.envelope_id != dedup_key(payload):
            raise ParseError("envelope id does not match payload hash")
        return env


def make_envelope(payload, src, dst, agent, stored_at, collected_at):
    return MeasurementEnvelope(dedup_key(payload), src, dst, agent, int(stored_at),
                               int(collected_at), payload)


@dataclass(frozen=True)
class PollCursor:
    agent: str
    last_seen: int = 0


def poll_agent(cursor, endpoint, collected_at, malformed=None):
    """Fetch every record stored at or after ``cursor.last_seen``.

    Returns ``(envelopes, new_cursor)``. Records sharing the boundary
    timestamp are fetched again on the next poll (at-least-once).
    Malformed lines are skipped and appended to ``malformed`` if given.
    Raises :class:`AgentUnreachable` with the caller's cursor untouched.
    """
    lines = endpoint.list_since(cursor.last_seen)
    envelopes = []
    last = cursor.last_seen
    for line in lines:
        try:
            env = MeasurementEnvelope.from_line(line)
        except ParseError as exc:
            log.warning("agent %s: skipping malformed record: %s", cursor.agent, exc)
            if malformed is not None:
                malformed.append(line)
            continue
        envelopes.append(replace(env, collected_at=int(collected_at)))
        last = max(last, env.stored_at)
    return envelopes, replace(cursor, last_seen=last)


@dataclass(frozen=True)
class Delivery:
    offset: int
    envelope: MeasurementEnvelope


def _matcher(topic_filter):
    if topic_filter in (None, "*", "#"):
        return lambda topic: True
    if isinstance(topic_filter, str):
        wanted = {topic_filter}
    else:
        wanted = set(topic_filter)
    return wanted.__contains__


class Subscription:
    """Pull-based cursor into the bus log.

    ``position`` is the next offset to read; ``committed`` is the offset
    after the last acknowledged delivery. A restarted consumer resubscribes
    at ``committed`` and receives the unacknowledged tail again.
    """

    def __init__(self, bus, topic_filter, start):
        self.bus = bus
        self.topic_filter = topic_filter
        self._match = _matcher(topic_filter)
        self.position = start
        self.committed = start
        self.closed = False

    def poll(self, max_items=None, timeout=None):
        """Return matching deliveries available now (waiting up to ``timeout`` s for one)."""
        if self.closed:
            return []
        with self.bus._cond:
            if timeout and self.position >= len(self.bus._log) and not self.bus.stopped:
                self.bus._cond.wait(timeout)
            out = []
            log_ = self.bus._log
            while self.position < len(log_):
                topic, env = log_[self.position]
                if self._match(topic):
                    out.append(Delivery(self.position, env))
                self.position += 1
                if max_items is not None and len(out) >= max_items:
                    break
            return out

    def ack(self, delivery_or_offset):
        off = getattr(delivery_or_offset, "offset", delivery_or_offset)
        self.committed = max(self.committed, off + 1)

    def close(self):
        self.closed = True

    def __iter__(self):
        """Yield envelopes until the bus is stopped and drained; acks as it goes."""
        while True:
            batch = self.poll(timeout=0.1)
            for d in batch:
                yield d.envelope
                self.ack(d)
            if not batch and self.bus.stopped and self.position >= len(self.bus._log):
                return


class MessageBus:
    """Topic-based, in-process message log with fan-out to subscribers.

    All envelopes go into one append-only log, so the order a single
    publisher produces is preserved for every topic.
    """

    def __init__(self):
        self._log = []
        self._cond = threading.Condition()
        self.stopped = False

    def __len__(self):
        with self._cond:
            return len(self._log)

    def publish(self, topic, env):
        if topic not in TOPICS:
            raise ValueError(f"unknown topic {topic!r}")
        with self._cond:
            if self.stopped:
                raise BusStopped("publish to stopped bus")
            self._log.append((topic, env))
            offset = len(self._log) - 1
            self._cond.notify_all()
        return offset

    def subscribe(self, topic_filter="*", start=None):
        """Subscribe from ``start`` (default: the current end of the log)."""
        with self._cond:
            if start is None:
                start = len(self._log)
        return Subscription(self, topic_filter, start)

    def stop(self):
        with self._cond:
            self.stopped = True
            self._cond.notify_all()


def publish(bus, topic, env):
    return bus.publish(topic, env)


def subscribe(bus, topic_filter="*", start=None):
    return bus.subscribe(topic_filter, start)


class Collector:
    """Polls a set of agent endpoints and publishes what it finds."""

    def __init__(self, bus, endpoints: dict, poll_period_ms=DEFAULT_POLL_PERIOD_MS):
        self.bus = bus
        self.endpoints = dict(endpoints)
        self.poll_period_ms = poll_period_ms
        self.cursors = {host: PollCursor(host) for host in self.endpoints}
        self.malformed = []
        self.failures = []

    def poll_one(self, host, now):
        cursor = self.cursors[host]
        envs, new = poll_agent(cursor, self.endpoints[host], now, self.malformed)
        self.cursors[host] = new
        return envs

    def poll_all(self, now, executor=None):
        """Poll every agent (optionally in parallel) and publish in host order.

        Returns the number of envelopes published. Unreachable agents are
        logged and recorded in ``failures``; their cursors stay put.
        """
        hosts = sorted(self.endpoints)

        def fetch(host):
            try:
                return self.poll_one(host, now)
            except AgentUnreachable as exc:
                log.info("poll at %d: %s", now, exc)
                self.failures.append((now, host))
                return []

        results = list(executor.map(fetch, hosts)) if executor else [fetch(h) for h in hosts]
        count = 0
        for envs in results:
            for env in envs:
                self.bus.publish(env.metric_kind, env)
                count += 1
        return count
