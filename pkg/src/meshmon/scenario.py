"""End-to-end scenario engine.

A scenario file (YAML) names a topology document, a mesh configuration and
an optional fault timeline::

    topology: topology.txt
    mesh: mesh.yaml
    duration_s: 14400
    poll_period_s: 60
    short_term_window_s: 3600
    thresholds: {loss_abs: 0.02, expected_mtu: 1500}
    events:
      - {at_s: 7200, type: route_change, src: A, dst: C, route: [A, D, C]}
      - {at_s: 7200, type: link, link: [A, B], loss: 0.1, bandwidth_mbps: 10}
      - {at_s: 9000, type: agent_halt, host: ps-c}

Simulated time advances one poll period per :meth:`ScenarioRunner.step`.
Within a step, due tests run in time order, results are committed to agent
archives once complete, every agent is polled, the bus is drained into the
short-term store, the long-term store and the analytics consumer, then the
short-term store is pruned and agent freshness is checked.
"""

from __future__ import annotations

import heapq
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import yaml

from . import analytics, netsim
from .agent import Agent, LocalEndpoint
from .collector import Collector, MessageBus
from .errors import ConfigError, ParseError, ValidationError
from .meshconfig import load_config, schedule_for_config, next_due
from .store import LongTermStore, ShortTermStore, export_snapshot

log = logging.getLogger(__name__)

SHORT_LOG = "shortterm.log"
LONG_LOG = "longterm.log"
ALERT_LOG = "alerts.log"
RUN_META = "run.json"
SNAPSHOT = "longterm.snapshot"

_THRESHOLD_KEYS = {"loss_abs", "loss_mad_k", "throughput_rel_drop", "stale_k",
                   "baseline_window", "expected_mtu"}
_LINK_EVENT_KEYS = {"loss": "loss_prob", "bandwidth_mbps": "bandwidth",
                    "latency_ms": "base_latency", "jitter_ms": "jitter_max", "mtu": "mtu"}


@dataclass
class Scenario:
    topology: netsim.TopologySpec
    config: object
    duration_ms: int
    poll_period_ms: int = 60_000
    short_term_window_ms: int = 3_600_000
    thresholds: analytics.Thresholds = field(default_factory=analytics.Thresholds)
    halts: dict = field(default_factory=dict)

    def __post_init__(self):
        self.schedule = schedule_for_config(self.config)
        if self.poll_period_ms <= 0 or self.duration_ms <= 0:
            raise ValidationError("duration and poll period must be positive")
        for host in self.halts:
            if host not in self.config.hosts:
                raise ValidationError(f"agent_halt: unknown host {host}")


def _apply_event(topo, ev, hosts, halts):
    try:
        kind = ev["type"]
        at = int(round(float(ev["at_s"]) * 1000))
    except KeyError as exc:
        raise ValidationError(f"event missing {exc.args[0]}: {ev}") from None
    if kind == "route_change":
        return netsim.inject_route_change(topo, ev["src"], ev["dst"], ev["route"], at)
    if kind == "link":
        changes = {_LINK_EVENT_KEYS[k]: v for k, v in ev.items() if k in _LINK_EVENT_KEYS}
        if not changes:
            raise ValidationError(f"link event changes nothing: {ev}")
        try:
            return netsim.inject_link_change(topo, tuple(ev["link"]), at, **changes)
        except netsim.UnknownLinkError as exc:
            raise ValidationError(str(exc)) from None
    if kind == "agent_halt":
        halts[str(ev["host"])] = at
        return topo
    raise ValidationError(f"unknown event type {kind!r}")


def load_scenario(path, duration_s=None):
    """Read a scenario file and everything it references; all config errors surface here."""
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: scenario must be a mapping")
    try:
        topo = netsim.load_topology(os.path.join(base, doc["topology"]))
        cfg = load_config(os.path.join(base, doc["mesh"]), topo)
    except KeyError as exc:
        raise ValidationError(f"scenario missing {exc.args[0]}") from None
    th = dict(doc.get("thresholds") or {})
    unknown = set(th) - _THRESHOLD_KEYS
    if unknown:
        raise ValidationError(f"unknown thresholds {sorted(unknown)}")
    try:
        thresholds = analytics.Thresholds(**th)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    halts = {}
    for ev in doc.get("events") or []:
        topo = _apply_event(topo, ev, cfg.hosts, halts)
    dur = duration_s if duration_s is not None else doc.get("duration_s", 3600)
    return Scenario(
        topology=topo,
        config=cfg,
        duration_ms=int(round(float(dur) * 1000)),
        poll_period_ms=int(round(float(doc.get("poll_period_s", 60)) * 1000)),
        short_term_window_ms=int(round(float(doc.get("short_term_window_s", 3600)) * 1000)),
        thresholds=thresholds,
        halts=halts,
    )


class AnalyticsConsumer:
    """Bus subscriber feeding per-pair monitors; idempotent on envelope id."""

    def __init__(self, thresholds, repeat_intervals, poll_period_ms):
        self.thresholds = thresholds
        self.seen = set()
        self.loss = {}
        self.throughput = {}
        self.paths = {}
        self.latest_stored = {}
        self.freshness = analytics.FreshnessMonitor(repeat_intervals, thresholds, poll_period_ms)

    def consume(self, env, now):
        if env.envelope_id in self.seen:
            return []
        self.seen.add(env.envelope_id)
        if env.stored_at > self.latest_stored.get(env.agent, -1):
            self.latest_stored[env.agent] = env.stored_at
        subject = (env.src, env.dst)
        kind = env.metric_kind
        if kind == "latency":
            mon = self.loss.setdefault(subject, analytics.LossMonitor(subject, self.thresholds))
            a = mon.update(env.payload, now)
            return [a] if a else []
        if kind == "throughput":
            mon = self.throughput.setdefault(
                subject, analytics.ThroughputMonitor(subject, self.thresholds))
            a = mon.update(env.payload, now)
            return [a] if a else []
        mon = self.paths.setdefault(subject, analytics.PathMonitor(subject, self.thresholds))
        return mon.update(env.payload, now)

    def check_freshness(self, now):
        return self.freshness.update(self.latest_stored, now)


def repeat_intervals_by_host(schedule):
    out = {}
    for e in schedule:
        out[e.src] = min(out.get(e.src, e.repeat_interval), e.repeat_interval)
    return out


class ScenarioRunner:
    def __init__(self, scenario, outdir=None, workers=4):
        self.sc = scenario
        self.outdir = outdir
        cfg = scenario.config
        hosts_by_node = cfg.hosts_by_node
        self.agents = {
            h.host_id: Agent(h.host_id, h.node, scenario.topology, hosts_by_node)
            for h in cfg.hosts.values()
        }
        self.endpoints = {h: LocalEndpoint(a) for h, a in self.agents.items()}
        self.bus = MessageBus()
        self.collector = Collector(self.bus, self.endpoints, scenario.poll_period_ms)
        path = (lambda name: os.path.join(outdir, name)) if outdir else (lambda name: None)
        if outdir:
            os.makedirs(outdir, exist_ok=True)
            for name in (SHORT_LOG, LONG_LOG, ALERT_LOG):
                if os.path.exists(path(name)):
                    os.remove(path(name))
        self.short = ShortTermStore(scenario.short_term_window_ms, path(SHORT_LOG))
        self.long = LongTermStore(path(LONG_LOG))
        self._alert_fh = open(path(ALERT_LOG), "w", encoding="utf-8") if outdir else None
        self.subs = {
            "short": self.bus.subscribe("*", start=0),
            "long": self.bus.subscribe("*", start=0),
            "analytics": self.bus.subscribe("*", start=0),
        }
        self.repeat_intervals = repeat_intervals_by_host(scenario.schedule)
        self.analytics = AnalyticsConsumer(scenario.thresholds, self.repeat_intervals,
                                           scenario.poll_period_ms)
        self.alerts = []
        self.now = 0
        self._pending = []
        self._seq = 0
        self._executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
        self.skipped_tests = 0

    def halted(self, host, t):
        at = self.sc.halts.get(host)
        return at is not None and t >= at

    def _run_tests(self, t0, t1):
        cfg = self.sc.config
        for entry, t in next_due(self.sc.schedule, t0, t1 - t0):
            if self.halted(entry.src, t) or self.halted(entry.dst, t):
                self.skipped_tests += 1
                continue
            agent = self.agents[entry.src]
            payload = agent.execute(entry.spec, cfg.node_of(entry.dst), t,
                                    peer=self.agents[entry.dst])
            self._seq += 1
            heapq.heappush(self._pending, (t + entry.spec.length_ms, self._seq, entry.src, payload))

    def _commit(self, now):
        while self._pending and self._pending[0][0] <= now:
            stored_at, _, host, payload = heapq.heappop(self._pending)
            self.agents[host].archive.store(payload, stored_at)

    def _drain(self, now):
        for d in self.subs["short"].poll():
            self.short.append(d.envelope)
            self.subs["short"].ack(d)
        for d in self.subs["long"].poll():
            self.long.append(d.envelope)
            self.subs["long"].ack(d)
        new_alerts = []
        for d in self.subs["analytics"].poll():
            new_alerts.extend(self.analytics.consume(d.envelope, now))
            self.subs["analytics"].ack(d)
        return new_alerts

    def _emit(self, alerts):
        for a in alerts:
            self.alerts.append(a)
            if self._alert_fh:
                self._alert_fh.write(a.to_line() + "\n")
        if self._alert_fh:
            self._alert_fh.flush()

    def step(self):
        """Advance one poll period; returns alerts raised during it."""
        t0 = self.now
        t1 = t0 + self.sc.poll_period_ms
        self._run_tests(t0, t1)
        self._commit(t1)
        for host, ep in self.endpoints.items():
            ep.up = not self.halted(host, t1)
        self.collector.poll_all(t1, self._executor)
        alerts = self._drain(t1)
        self.short.prune(t1)
        alerts.extend(self.analytics.check_freshness(t1))
        self._emit(alerts)
        self.now = t1
        return alerts

    def run(self):
        while self.now < self.sc.duration_ms:
            self.step()
        return self.finish()

    def finish(self):
        if self._executor:
            self._executor.shutdown(wait=True)
            self._executor = None
        self.bus.stop()
        if self.outdir:
            export_snapshot(self.long, os.path.join(self.outdir, SNAPSHOT))
            with open(os.path.join(self.outdir, RUN_META), "w", encoding="utf-8") as fh:
                json.dump(self.metadata(), fh, indent=2, sort_keys=True)
                fh.write("\n")
        self.short.close()
        self.long.close()
        if self._alert_fh:
            self._alert_fh.close()
            self._alert_fh = None
        return self.alerts

    def metadata(self):
        th = self.sc.thresholds
        return {
            "hosts": list(self.sc.config.hosts),
            "end_time": self.now,
            "poll_period_ms": self.sc.poll_period_ms,
            "repeat_intervals_ms": self.repeat_intervals,
            "thresholds": {k: getattr(th, k) for k in sorted(_THRESHOLD_KEYS)},
        }


def run_scenario(path, outdir, duration_s=None):
    sc = load_scenario(path, duration_s)
    runner = ScenarioRunner(sc, outdir)
    return runner.run()


__all__ = ["Scenario", "ScenarioRunner", "load_scenario", "run_scenario", "ConfigError"]
