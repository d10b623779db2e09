"""Job file-transfer TCP statistics: parsing, geo annotation, aggregation.

Log line grammar, space-separated ``key=value`` with these required keys::

    ts=2020-01-15T12:00:00Z submit=s1.example.org worker=10.2.3.4 bytes=123456789 \
lost_pkts=12 reorders=3 duration_s=42.5

Unknown keys are ignored and counted. Geo tables are CSV lines
``prefix,region,lat,lon``; lookups use longest-prefix match.
"""

from __future__ import annotations

import csv
import ipaddress
import logging
from collections import Counter
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from typing import Optional

from .errors import ParseError

log = logging.getLogger(__name__)

REQUIRED_KEYS = ("ts", "submit", "worker", "bytes", "lost_pkts", "reorders", "duration_s")
TS_FORMAT = "%Y-%m-%dT%H:%M:%SZ"
UNLOCATED = "unlocated"


@dataclass(frozen=True)
class GeoInfo:
    region: str
    latitude: float
    longitude: float


@dataclass(frozen=True)
class JobTransferRecord:
    timestamp: datetime
    submit_host: str
    worker_addr: str
    bytes: int
    lost_pkts: int
    reorders: int
    duration: float
    geo: Optional[GeoInfo] = None


@dataclass
class ParseStats:
    lines: int = 0
    errors: int = 0
    unknown_keys: int = 0


def _nonneg_int(key, value, lineno):
    if not (value.isascii() and value.isdigit()):
        raise ParseError(f"{key} must be a non-negative integer, got {value!r}", lineno, key)
    return int(value)


def parse_line(line, lineno=None, stats=None):
    """Parse one log line into a :class:`JobTransferRecord`."""
    fields = {}
    for tok in line.split():
        key, sep, value = tok.partition("=")
        if not sep:
            raise ParseError(f"token {tok!r} is not key=value", lineno)
        if key not in REQUIRED_KEYS:
            log.debug("line %s: ignoring unknown key %s", lineno, key)
            if stats is not None:
                stats.unknown_keys += 1
            continue
        if key in fields:
            raise ParseError(f"duplicate key {key}", lineno, key)
        fields[key] = value
    for key in REQUIRED_KEYS:
        if key not in fields:
            raise ParseError(f"missing required key {key}", lineno, key)
    try:
        ts = datetime.strptime(fields["ts"], TS_FORMAT).replace(tzinfo=timezone.utc)
    except ValueError:
        raise ParseError(f"bad timestamp {fields['ts']!r}", lineno, "ts") from None
    try:
        ipaddress.ip_address(fields["worker"])
    except ValueError:
        raise ParseError(f"bad worker address {fields['worker']!r}", lineno, "worker") from None
    try:
        duration = float(fields["duration_s"])
    except ValueError:
        raise ParseError("duration_s must be a number", lineno, "duration_s") from None
    if not duration > 0 or duration != duration or duration == float("inf"):
        raise ParseError("duration_s must be a positive finite number", lineno, "duration_s")
    return JobTransferRecord(
        timestamp=ts,
        submit_host=fields["submit"],
        worker_addr=fields["worker"],
        bytes=_nonneg_int("bytes", fields["bytes"], lineno),
        lost_pkts=_nonneg_int("lost_pkts", fields["lost_pkts"], lineno),
        reorders=_nonneg_int("reorders", fields["reorders"], lineno),
        duration=duration,
    )


def serialize_record(rec):
    """Canonical line; the inverse of :func:`parse_line` for canonical input."""
    return (f"ts={rec.timestamp.strftime(TS_FORMAT)} submit={rec.submit_host} "
            f"worker={rec.worker_addr} bytes={rec.bytes} lost_pkts={rec.lost_pkts} "
            f"reorders={rec.reorders} duration_s={format_duration(rec.duration)}")


def format_duration(d):
    """Integral durations print without a fractional part, others as the shortest repr."""
    return str(int(d)) if float(d).is_integer() else repr(float(d))


def parse_lines(lines, stats=None, strict=False):
    """Parse an iterable of lines, skipping (or raising on) bad ones."""
    stats = stats if stats is not None else ParseStats()
    out = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        stats.lines += 1
        try:
            out.append(parse_line(line, lineno, stats))
        except ParseError as exc:
            stats.errors += 1
            if strict:
                raise
            log.warning("skipping job log %s", exc)
    return out


@dataclass(frozen=True)
class GeoEntry:
    prefix: str
    region: str
    latitude: float
    longitude: float

    @property
    def network(self):
        return ipaddress.ip_network(self.prefix, strict=True)


class GeoTable:
    """Longest-prefix-match table over IPv4 and IPv6 networks.

    Entries are bucketed by prefix length; a lookup masks the address at
    each length present, longest first.
    """

    def __init__(self, entries=()):
        self._buckets = {}  # (version, prefixlen) -> {network_int: GeoEntry}
        self.entries = []
        for e in entries:
            self.add(e)

    def add(self, entry):
        net = entry.network
        self._buckets.setdefault((net.version, net.prefixlen), {})[int(net.network_address)] = entry
        self.entries.append(entry)
        self._order = sorted(self._buckets, key=lambda k: (k[0], -k[1]))

    def lookup(self, addr):
        ip = ipaddress.ip_address(addr)
        width = ip.max_prefixlen
        value = int(ip)
        for version, plen in self._order:
            if version != ip.version:
                continue
            mask = ((1 << plen) - 1) << (width - plen) if plen else 0
            hit = self._buckets[(version, plen)].get(value & mask)
            if hit is not None:
                return hit
        return None


def parse_geo_table(lines):
    entries = []
    for lineno, row in enumerate(csv.reader(lines), start=1):
        if not row or row[0].startswith("#"):
            continue
        if len(row) != 4:
            raise ParseError("geo row needs prefix,region,lat,lon", lineno)
        prefix, region, lat, lon = (c.strip() for c in row)
        try:
            entry = GeoEntry(prefix, region, float(lat), float(lon))
            entry.network
        except ValueError as exc:
            raise ParseError(f"bad geo row: {exc}", lineno) from None
        entries.append(entry)
    return GeoTable(entries)


def load_geo_table(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_geo_table(fh)


def geo_annotate(rec, table):
    """Attach the longest-matching prefix's region; unmatched records stay unlocated."""
    hit = table.lookup(rec.worker_addr)
    if hit is None:
        return replace(rec, geo=None)
    return replace(rec, geo=GeoInfo(hit.region, hit.latitude, hit.longitude))


def _group_key(rec, group_by, prefix_len):
    if group_by == "region":
        return rec.geo.region if rec.geo is not None else UNLOCATED
    if group_by == "worker_prefix":
        ip = ipaddress.ip_address(rec.worker_addr)
        plen = prefix_len if ip.version == 4 else 64
        return str(ipaddress.ip_network(f"{rec.worker_addr}/{plen}", strict=False))
    raise ValueError(f"unknown group_by {group_by!r}")


def partial_aggregate(records, group_by="region", prefix_len=24):
    """(bytes, count) Counters per group; merge partials with ``+``."""
    total, count = Counter(), Counter()
    for rec in records:
        key = _group_key(rec, group_by, prefix_len)
        total[key] += rec.bytes
        count[key] += 1
    return total, count


def aggregate_bytes_by_destination(records, group_by="region", prefix_len=24):
    """``[(group, total_bytes, record_count)]`` sorted by total descending, then group."""
    total, count = partial_aggregate(records, group_by, prefix_len)
    rows = [(g, total[g], count[g]) for g in count]
    rows.sort(key=lambda r: (-r[1], r[0]))
    return rows


def format_aggregate(rows):
    return "".join(f"{g}\t{b}\t{c}\n" for g, b, c in rows)


def format_points(records):
    """Located records as ``lat<TAB>lon<TAB>region<TAB>bytes`` lines."""
    return "".join(
        f"{r.geo.latitude}\t{r.geo.longitude}\t{r.geo.region}\t{r.bytes}\n"
        for r in records if r.geo is not None
    )
