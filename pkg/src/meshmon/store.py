"""Tiered envelope storage.

Both tiers are an append log of envelope wire lines plus an in-memory
index sorted by ``(start_time, envelope_id)``. The short-term tier drops
envelopes older than its window on :meth:`ShortTermStore.prune`; the
long-term tier keeps everything and can be exported as a checksummed
snapshot (log lines followed by one manifest line).
"""

from __future__ import annotations

import bisect
import hashlib
import os
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .collector import MeasurementEnvelope
from .errors import MeshmonError, ParseError

MANIFEST_PREFIX = "#manifest "


class StoreError(MeshmonError, OSError):
    pass


class SnapshotError(MeshmonError):
    """Snapshot manifest missing or not matching the snapshot body."""


class AppendResult(str, Enum):
    ACCEPTED = "accepted"
    DUPLICATE = "duplicate"


@dataclass(frozen=True)
class RetentionPolicy:
    window: Optional[int] = None  # ms; None means keep forever
    long_term: bool = False

    def __post_init__(self):
        if self.long_term == (self.window is not None):
            raise ValueError("set exactly one of window (short-term) or long_term")
        if self.window is not None and self.window <= 0:
            raise ValueError("retention window must be > 0")


@dataclass(frozen=True)
class QueryFilter:
    """Match on any present field; time range is ``[t0, t1)`` on start_time."""

    src: Optional[str] = None
    dst: Optional[str] = None
    metric_kind: Optional[str] = None
    t0: int = 0
    t1: Optional[int] = None

    def __post_init__(self):
        if self.t1 is not None and self.t0 > self.t1:
            raise ValueError("query range needs t0 <= t1")

    def matches(self, env):
        if self.src is not None and env.src != self.src:
            return False
        if self.dst is not None and env.dst != self.dst:
            return False
        if self.metric_kind is not None and env.metric_kind != self.metric_kind:
            return False
        t = env.start_time
        return t >= self.t0 and (self.t1 is None or t < self.t1)


@dataclass(frozen=True)
class Manifest:
    count: int
    checksum: str

    def to_line(self):
        return f"{MANIFEST_PREFIX}count={self.count} sha256={self.checksum}"


def _sort_key(env):
    return (env.start_time, env.envelope_id)


class _EnvelopeStore:
    def __init__(self, path=None, readonly=False):
        self.path = path
        self.readonly = readonly
        self._lock = threading.RLock()
        self._by_id = {}
        self._keys = []  # sorted (start_time, id)
        self.accepted = 0
        self.duplicates = 0
        self._fh = None
        if path is not None:
            if os.path.exists(path):
                self._load(path)
            elif readonly:
                raise StoreError(f"store log {path} does not exist")
        if path is not None and not readonly:
            try:
                self._fh = open(path, "a", encoding="utf-8", newline="\n")
            except OSError as exc:
                raise StoreError(f"cannot open store log {path}: {exc}") from exc

    def _load(self, path):
        try:
            with open(path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    try:
                        env = MeasurementEnvelope.from_line(line)
                    except ParseError as exc:
                        raise StoreError(f"{path}:{lineno}: {exc}") from exc
                    self._insert(env)
        except OSError as exc:
            raise StoreError(f"cannot read store log {path}: {exc}") from exc

    def _insert(self, env):
        if env.envelope_id in self._by_id:
            return False
        self._by_id[env.envelope_id] = env
        bisect.insort(self._keys, _sort_key(env))
        self.accepted += 1
        return True

    def __len__(self):
        with self._lock:
            return len(self._by_id)

    def __contains__(self, envelope_id):
        with self._lock:
            return envelope_id in self._by_id

    def append(self, env):
        """Insert ``env`` unless an envelope with the same id is already stored."""
        if self.readonly:
            raise StoreError("store opened read-only")
        with self._lock:
            if not self._insert(env):
                self.duplicates += 1
                return AppendResult.DUPLICATE
            if self._fh is not None:
                try:
                    self._fh.write(env.to_line() + "\n")
                    self._fh.flush()
                except OSError as exc:
                    raise StoreError(f"append to {self.path} failed: {exc}") from exc
            return AppendResult.ACCEPTED

    def all(self):
        """Point-in-time snapshot of every envelope, in query order."""
        with self._lock:
            return [self._by_id[i] for _, i in self._keys]

    def query(self, f=None):
        f = f or QueryFilter()
        with self._lock:
            lo = bisect.bisect_left(self._keys, (f.t0, ""))
            hi = len(self._keys) if f.t1 is None else bisect.bisect_left(self._keys, (f.t1, ""))
            candidates = [self._by_id[i] for _, i in self._keys[lo:hi]]
        return [env for env in candidates if f.matches(env)]

    def ids(self):
        with self._lock:
            return set(self._by_id)

    def latest_stored_by_agent(self):
        with self._lock:
            latest = {}
            for env in self._by_id.values():
                if env.stored_at > latest.get(env.agent, -1):
                    latest[env.agent] = env.stored_at
            return latest

    def close(self):
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ShortTermStore(_EnvelopeStore):
    """Windowed store: keeps envelopes with ``start_time >= now - window``."""

    def __init__(self, window, path=None, readonly=False):
        if window <= 0:
            raise ValueError("retention window must be > 0")
        self.window = window
        self.pruned = 0
        super().__init__(path, readonly)

    def prune(self, now):
        """Drop envelopes with ``start_time < now - window``; return how many."""
        cutoff = now - self.window
        if self.readonly:
            raise StoreError("store opened read-only")
        with self._lock:
            cut = bisect.bisect_left(self._keys, (cutoff, ""))
            if cut == 0:
                return 0
            for _, eid in self._keys[:cut]:
                del self._by_id[eid]
            del self._keys[:cut]
            self.pruned += cut
            if self.path is not None:
                self._rewrite()
            return cut

    def _rewrite(self):
        # Keep the log in append order so replays stay deterministic.
        tmp = self.path + ".tmp"
        try:
            self._fh.close()
            with open(self.path, encoding="utf-8") as src, \
                    open(tmp, "w", encoding="utf-8", newline="\n") as dst:
                for line in src:
                    eid = line[3:line.index(" ")]
                    if eid in self._by_id:
                        dst.write(line)
            os.replace(tmp, self.path)
            self._fh = open(self.path, "a", encoding="utf-8", newline="\n")
        except OSError as exc:
            raise StoreError(f"prune rewrite of {self.path} failed: {exc}") from exc


class LongTermStore(_EnvelopeStore):
    """Unbounded store of the full dataset. Deliberately has no ``prune``."""


def make_store(policy, path=None):
    if policy.long_term:
        return LongTermStore(path)
    return ShortTermStore(policy.window, path)


def append(store, env):
    return store.append(env)


def query(store, f=None):
    return store.query(f)


def prune(store, now):
    return store.prune(now)


def _snapshot_body(envs):
    return "".join(env.to_line() + "\n" for env in envs)


def export_snapshot(store, destination):
    """Write the store's contents plus a manifest line; return the manifest."""
    body = _snapshot_body(store.all())
    manifest = Manifest(body.count("\n"), hashlib.sha256(body.encode("utf-8")).hexdigest())
    try:
        with open(destination, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(body)
            fh.write(manifest.to_line() + "\n")
    except OSError as exc:
        raise StoreError(f"snapshot export to {destination} failed: {exc}") from exc
    return manifest


def read_manifest(line):
    if not line.startswith(MANIFEST_PREFIX):
        raise SnapshotError("snapshot has no manifest line")
    fields = dict(tok.split("=", 1) for tok in line[len(MANIFEST_PREFIX):].split())
    try:
        return Manifest(int(fields["count"]), fields["sha256"])
    except (KeyError, ValueError):
        raise SnapshotError(f"bad manifest line {line!r}") from None


def import_snapshot(source, store):
    """Verify a snapshot and append its envelopes to ``store``."""
    try:
        with open(source, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise StoreError(f"cannot read snapshot {source}: {exc}") from exc
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise SnapshotError("snapshot is not valid UTF-8") from None
    if not text.endswith("\n"):
        raise SnapshotError("snapshot truncated")
    body, _, last = text[:-1].rpartition("\n")
    body = body + "\n" if body else ""
    manifest = read_manifest(last)
    if hashlib.sha256(body.encode("utf-8")).hexdigest() != manifest.checksum:
        raise SnapshotError("snapshot checksum mismatch")
    lines = body.splitlines()
    if len(lines) != manifest.count:
        raise SnapshotError("snapshot record count mismatch")
    for line in lines:
        try:
            store.append(MeasurementEnvelope.from_line(line))
        except ParseError as exc:
            raise SnapshotError(f"bad snapshot record: {exc}") from exc
    return manifest
