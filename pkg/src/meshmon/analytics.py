"""Findings from stored measurements: path identity, route changes and alert rules.

The single-shot rule functions (``detect_*`` / ``check_*``) are pure. The
``*Monitor`` classes run those rules over a time-ordered stream and only
raise an alert when a subject escalates into a worse state, so a fault
that persists for hours produces one alert rather than one per sample.
Monitors keep their baselines from healthy samples only.
"""

from __future__ import annotations

import hashlib
import math
import statistics
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .errors import MeshmonError, ParseError
from .records import UNKNOWN_HOP

ALERT_KINDS = ("route_change", "mtu_violation", "loss_anomaly", "throughput_degradation",
               "stale_agent")
SEVERITIES = ("warn", "critical")
MIN_BASELINE = 5
INF_LAG = math.inf


class InsufficientBaseline(MeshmonError):
    """Fewer than ``MIN_BASELINE`` samples; statistical rules cannot run."""


@dataclass(frozen=True)
class Thresholds:
    """Shared by analytics and the dashboard so statuses never disagree."""

    loss_abs: float = 0.02
    loss_mad_k: float = 5.0
    throughput_rel_drop: float = 0.5
    stale_k: float = 3.0
    baseline_window: int = 20
    expected_mtu: Optional[int] = None

    def __post_init__(self):
        if self.stale_k < 1:
            raise ValueError("stale_k must be >= 1")
        if not 0 < self.throughput_rel_drop < 1:
            raise ValueError("throughput_rel_drop must be in (0,1)")
        if self.baseline_window < MIN_BASELINE:
            raise ValueError(f"baseline_window must be >= {MIN_BASELINE}")


def fmt_value(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v) or "-"
    return str(v)


@dataclass(frozen=True)
class Alert:
    """``evidence`` is an ordered tuple of ``(key, text)``; always has ``threshold``."""

    kind: str
    severity: str
    subject: tuple
    evidence: tuple
    raised_at: int

    def __post_init__(self):
        if self.kind not in ALERT_KINDS:
            raise ValueError(f"unknown alert kind {self.kind!r}")
        if self.severity not in SEVERITIES:
            raise ValueError(f"unknown severity {self.severity!r}")
        if "threshold" not in dict(self.evidence):
            raise ValueError("alert evidence must include the threshold")

    @property
    def evidence_dict(self):
        return dict(self.evidence)

    def to_line(self):
        ev = " ".join(f"{k}={v}" for k, v in self.evidence)
        return (f"raised={self.raised_at} kind={self.kind} severity={self.severity} "
                f"subject={','.join(self.subject)} {ev}")

    @classmethod
    def from_line(cls, line):
        tokens = line.rstrip("\n").split(" ")
        pairs = []
        for tok in tokens:
            k, sep, v = tok.partition("=")
            if not sep:
                raise ParseError(f"bad alert token {tok!r}")
            pairs.append((k, v))
        head = dict(pairs[:4])
        if [k for k, _ in pairs[:4]] != ["raised", "kind", "severity", "subject"]:
            raise ParseError("alert line must start with raised, kind, severity, subject")
        return cls(head["kind"], head["severity"], tuple(head["subject"].split(",")),
                   tuple(pairs[4:]), int(head["raised"]))


def make_alert(kind, severity, subject, raised_at, **evidence):
    ev = tuple((k, fmt_value(v)) for k, v in evidence.items())
    return Alert(kind, severity, tuple(subject), ev, int(raised_at))


@dataclass(frozen=True)
class PathSignature:
    signature: str
    hop_list: tuple


def path_signature(pm):
    """128-bit hash of the ordered hop node ids; RTTs and times are ignored."""
    hops = tuple(pm.hop_nodes if hasattr(pm, "hop_nodes") else pm)
    if not hops:
        raise ValueError("cannot sign an empty hop list")
    digest = hashlib.blake2b("\n".join(hops).encode("utf-8"), digest_size=16).hexdigest()
    return PathSignature(digest, hops)


@dataclass(frozen=True)
class RouteChange:
    time: int
    old: PathSignature
    new: PathSignature
    incomplete_skipped: int = 0


def detect_route_changes(series):
    """One event per adjacent pair of complete traces with different hop lists.

    Incomplete traces are skipped; the number skipped since the previous
    complete trace is reported on the event.
    """
    events = []
    prev = None
    skipped = 0
    for pm in series:
        if not pm.complete:
            skipped += 1
            continue
        sig = path_signature(pm)
        if prev is not None and sig.signature != prev.signature:
            events.append(RouteChange(pm.start_time, prev, sig, skipped))
        prev = sig
        skipped = 0
    return events


@dataclass(frozen=True)
class PathCount:
    signature: PathSignature
    count: int
    first_seen: int
    last_seen: int


def distinct_paths(series, window=None):
    """Distinct complete paths within ``window=(t0, t1)``, most frequent first."""
    stats = {}
    for pm in series:
        if not pm.complete:
            continue
        if window is not None and not window[0] <= pm.start_time < window[1]:
            continue
        sig = path_signature(pm)
        cur = stats.get(sig.signature)
        if cur is None:
            stats[sig.signature] = [sig, 1, pm.start_time, pm.start_time]
        else:
            cur[1] += 1
            cur[2] = min(cur[2], pm.start_time)
            cur[3] = max(cur[3], pm.start_time)
    out = [PathCount(*v) for v in stats.values()]
    out.sort(key=lambda c: (-c.count, c.first_seen, c.signature.signature))
    return out


def check_path_mtu(pm, expected, raised_at=None, subject=None):
    if not pm.destination_reached:
        raise ValueError("path MTU check needs a trace that reached its destination")
    if pm.path_mtu >= expected:
        return None
    return make_alert(
        "mtu_violation", "warn", subject or (pm.src, pm.dst),
        pm.start_time if raised_at is None else raised_at,
        path_mtu=pm.path_mtu, expected=expected, threshold=expected, hops=pm.hop_nodes,
    )


@dataclass(frozen=True)
class BaselineStats:
    n: int
    median: float
    mad: float


def median_mad(values):
    med = statistics.median(values)
    return med, statistics.median(abs(v - med) for v in values)


def baseline_of(values):
    values = list(values)
    if len(values) < MIN_BASELINE:
        raise InsufficientBaseline(f"baseline needs {MIN_BASELINE} samples, got {len(values)}")
    med, mad = median_mad(values)
    return BaselineStats(len(values), med, mad)


def loss_baseline(samples):
    """Median and MAD of the loss fractions of ``samples`` (at least 5)."""
    return baseline_of(s.loss_fraction for s in samples)


def detect_loss_anomaly(sample, baseline, abs_threshold=0.02, mad_k=5.0, raised_at=None,
                        subject=None):
    """Critical at ``loss >= abs_threshold``; warn above ``median + mad_k * mad``.

    The statistical rule is skipped when ``baseline`` is None or too small.
    """
    f = sample.loss_fraction
    subject = subject or (sample.src, sample.dst)
    raised_at = sample.start_time if raised_at is None else raised_at
    has_base = baseline is not None and baseline.n >= MIN_BASELINE
    med = baseline.median if has_base else None
    mad = baseline.mad if has_base else None
    stat_threshold = med + mad_k * mad if has_base else None
    ev = dict(loss=f, median=med if has_base else "-", mad=mad if has_base else "-",
              abs_threshold=abs_threshold,
              stat_threshold=stat_threshold if has_base else "-")
    if f >= abs_threshold:
        return make_alert("loss_anomaly", "critical", subject, raised_at, **ev,
                          threshold=abs_threshold)
    if has_base and f > stat_threshold:
        return make_alert("loss_anomaly", "warn", subject, raised_at, **ev,
                          threshold=stat_threshold)
    return None


def detect_throughput_degradation(series, rel_drop=0.5, window=20, raised_at=None,
                                  subject=None):
    """Alert if the last result is below ``(1 - rel_drop)`` of the median of the
    preceding ``window`` results (at least 5 required)."""
    series = list(series)
    latest = series[-1]
    base = baseline_of(r.achieved_throughput for r in series[:-1][-window:])
    limit = (1.0 - rel_drop) * base.median
    if latest.achieved_throughput >= limit:
        return None
    return make_alert(
        "throughput_degradation", "critical", subject or (latest.src, latest.dst),
        latest.start_time if raised_at is None else raised_at,
        throughput=latest.achieved_throughput, baseline_median=base.median,
        rel_drop=rel_drop, threshold=limit,
    )


def stale_threshold(k, repeat_interval, poll_period=0):
    return k * max(repeat_interval, poll_period or 0)


def check_agent_freshness(latest, now, k, repeat_intervals, poll_period=0):
    """Stale-agent alerts for ``now - latest_stored_at > k * interval``.

    ``latest`` maps agent -> latest stored_at (None if never seen);
    ``repeat_intervals`` maps agent -> its shortest repeat interval. The
    interval is floored at ``poll_period`` since data is only visible per poll.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    alerts = []
    for agent in sorted(repeat_intervals):
        seen = latest.get(agent)
        lag = INF_LAG if seen is None else now - seen
        limit = stale_threshold(k, repeat_intervals[agent], poll_period)
        if lag > limit:
            alerts.append(make_alert(
                "stale_agent", "critical", (agent,), now,
                lag=lag, latest="-" if seen is None else seen, threshold=limit,
            ))
    return alerts


_LEVEL = {None: 0, "warn": 1, "critical": 2}


@dataclass
class LossMonitor:
    subject: tuple
    thresholds: Thresholds = field(default_factory=Thresholds)
    level: Optional[str] = None
    latest: Optional[float] = None

    def __post_init__(self):
        self.healthy = deque(maxlen=self.thresholds.baseline_window)

    def update(self, sample, raised_at):
        th = self.thresholds
        base = None
        if len(self.healthy) >= MIN_BASELINE:
            base = baseline_of(self.healthy)
        alert = detect_loss_anomaly(sample, base, th.loss_abs, th.loss_mad_k, raised_at,
                                    self.subject)
        new_level = alert.severity if alert else None
        self.latest = sample.loss_fraction
        if new_level is None:
            self.healthy.append(sample.loss_fraction)
        escalated = _LEVEL[new_level] > _LEVEL[self.level]
        self.level = new_level
        return alert if escalated else None


@dataclass
class ThroughputMonitor:
    subject: tuple
    thresholds: Thresholds = field(default_factory=Thresholds)
    degraded: bool = False
    latest: Optional[float] = None

    def __post_init__(self):
        self.healthy = deque(maxlen=self.thresholds.baseline_window)

    def update(self, result, raised_at):
        self.latest = result.achieved_throughput
        alert = None
        if len(self.healthy) >= MIN_BASELINE:
            alert = detect_throughput_degradation(
                list(self.healthy) + [result], self.thresholds.throughput_rel_drop,
                self.thresholds.baseline_window, raised_at, self.subject)
        was = self.degraded
        self.degraded = alert is not None
        if not self.degraded:
            self.healthy.append(result)
        return alert if self.degraded and not was else None


@dataclass
class PathMonitor:
    """Route-change and MTU-compliance tracking for one (src, dst) pair."""

    subject: tuple
    thresholds: Thresholds = field(default_factory=Thresholds)
    current: Optional[PathSignature] = None
    skipped: int = 0
    mtu_violating: bool = False
    latest_mtu: Optional[int] = None

    def update(self, pm, raised_at):
        alerts = []
        if not pm.complete:
            self.skipped += 1
            return alerts
        sig = path_signature(pm)
        if self.current is not None and sig.signature != self.current.signature:
            alerts.append(make_alert(
                "route_change", "warn", self.subject, raised_at,
                time=pm.start_time, old=self.current.signature, new=sig.signature,
                old_hops=self.current.hop_list, new_hops=sig.hop_list,
                incomplete_skipped=self.skipped, threshold="signature_mismatch",
            ))
        self.current = sig
        self.skipped = 0
        self.latest_mtu = pm.path_mtu
        expected = self.thresholds.expected_mtu
        if expected is not None:
            a = check_path_mtu(pm, expected, raised_at, self.subject)
            if a is not None and not self.mtu_violating:
                alerts.append(a)
            self.mtu_violating = a is not None
        return alerts


@dataclass
class FreshnessMonitor:
    repeat_intervals: dict
    thresholds: Thresholds = field(default_factory=Thresholds)
    poll_period: int = 0
    started_at: int = 0
    stale: set = field(default_factory=set)

    def update(self, latest, now):
        """Alerts for agents that just went stale.

        Agents are not judged until a full threshold has elapsed since
        ``started_at``, so a freshly started mesh is not reported stale.
        """
        k = self.thresholds.stale_k
        due = {a: iv for a, iv in self.repeat_intervals.items()
               if now - self.started_at > stale_threshold(k, iv, self.poll_period)}
        alerts = check_agent_freshness(latest, now, k, due, self.poll_period)
        now_stale = {a.subject[0] for a in alerts}
        fresh_alerts = [a for a in alerts if a.subject[0] not in self.stale]
        self.stale = now_stale
        return fresh_alerts


def scan_loss(samples, thresholds=None, subject=None):
    """Run a :class:`LossMonitor` over a series; returns ``(alerts, final_level)``."""
    samples = list(samples)
    if not samples:
        return [], None
    mon = LossMonitor(subject or (samples[0].src, samples[0].dst), thresholds or Thresholds())
    alerts = [a for s in samples if (a := mon.update(s, s.start_time))]
    return alerts, mon.level


def scan_throughput(results, thresholds=None, subject=None):
    results = list(results)
    if not results:
        return [], False
    mon = ThroughputMonitor(subject or (results[0].src, results[0].dst),
                            thresholds or Thresholds())
    alerts = [a for r in results if (a := mon.update(r, r.start_time))]
    return alerts, mon.degraded


def read_alert_log(path, since=None, kind=None):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            a = Alert.from_line(line)
            if since is not None and a.raised_at < since:
                continue
            if kind is not None and a.kind != kind:
                continue
            out.append(a)
    return out
