import random

import pytest
from hypothesis import given, settings, strategies as st

from meshmon.store import (
    AppendResult,
    LongTermStore,
    QueryFilter,
    RetentionPolicy,
    ShortTermStore,
    SnapshotError,
    StoreError,
    export_snapshot,
    import_snapshot,
    make_store,
    prune,
)

from conftest import envelope, latency, random_envelopes

HOSTS = ("ps-a", "ps-b", "ps-c")


def linear_scan(envs, f):
    out = []
    for e in envs:
        if f.src is not None and e.src != f.src:
            continue
        if f.dst is not None and e.dst != f.dst:
            continue
        if f.metric_kind is not None and e.metric_kind != f.metric_kind:
            continue
        if e.start_time < f.t0 or (f.t1 is not None and e.start_time >= f.t1):
            continue
        out.append(e)
    return sorted(out, key=lambda e: (e.start_time, e.envelope_id))


def random_filter(rng, t_max=10_000):
    t0 = rng.randrange(t_max)
    t1 = rng.choice([None, t0, rng.randrange(t0, t_max + 1)])
    return QueryFilter(
        src=rng.choice((None,) + HOSTS), dst=rng.choice((None,) + HOSTS),
        metric_kind=rng.choice([None, "latency", "throughput", "path"]), t0=t0, t1=t1)


def test_append_then_duplicate():
    s = LongTermStore()
    e = random_envelopes(1)[0]
    assert s.append(e) is AppendResult.ACCEPTED
    assert s.append(e) is AppendResult.DUPLICATE
    assert len(s) == 1 and s.duplicates == 1


def test_two_envelopes_queryable():
    s = LongTermStore()
    a = envelope(latency(start=10), "ps-a", "ps-b")
    b = envelope(latency(start=20, lost=1), "ps-a", "ps-b")
    s.append(b)
    s.append(a)
    f = QueryFilter("ps-a", "ps-b", "latency", 0, 100)
    assert s.query(f) == [a, b]
    assert s.query(QueryFilter(t0=15, t1=15)) == []


def test_query_filter_rejects_inverted_range():
    with pytest.raises(ValueError):
        QueryFilter(t0=10, t1=5)


def test_query_matches_linear_scan():
    envs = random_envelopes(600, 1)
    s = LongTermStore()
    for e in envs:
        s.append(e)
    rng = random.Random(2)
    for _ in range(1000):
        f = random_filter(rng)
        assert s.query(f) == linear_scan(envs, f)


def test_prune_examples():
    s = ShortTermStore(window=100)
    old = envelope(latency(start=10))
    new = envelope(latency(start=950))
    s.append(old)
    s.append(new)
    assert prune(s, 1000) == 1
    assert s.all() == [new]
    assert prune(s, 1000) == 0


def test_late_old_append_removed_at_next_prune():
    s = ShortTermStore(window=100)
    s.prune(1000)
    assert s.append(envelope(latency(start=5))) is AppendResult.ACCEPTED
    assert s.prune(1000) == 1 and len(s) == 0


def test_long_term_has_no_prune():
    assert not hasattr(LongTermStore(), "prune")
    with pytest.raises(ValueError):
        RetentionPolicy(window=0)
    with pytest.raises(ValueError):
        RetentionPolicy(window=10, long_term=True)
    assert isinstance(make_store(RetentionPolicy(long_term=True)), LongTermStore)
    assert isinstance(make_store(RetentionPolicy(window=5)), ShortTermStore)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), window=st.integers(1, 5000))
def test_conservation_and_window(seed, window):
    rng = random.Random(seed)
    short, long_ = ShortTermStore(window), LongTermStore()
    envs = random_envelopes(120, seed)
    now = 0
    for e in envs:
        short.append(e)
        long_.append(e)
        if rng.random() < 0.1:
            short.append(e)  # duplicate
        if rng.random() < 0.2:
            now += rng.randrange(500)
            short.prune(now)
            assert all(x.start_time >= now - window for x in short.all())
        assert short.accepted - short.pruned == len(short)
        assert short.ids() <= long_.ids()


def test_snapshot_round_trip(tmp_path):
    envs = random_envelopes(300, 5)
    s = LongTermStore()
    for e in envs:
        s.append(e)
    m = export_snapshot(s, tmp_path / "snap")
    assert m.count == 300
    fresh = LongTermStore()
    assert import_snapshot(tmp_path / "snap", fresh) == m
    rng = random.Random(6)
    for _ in range(200):
        f = random_filter(rng)
        assert fresh.query(f) == s.query(f)


def test_empty_snapshot(tmp_path):
    m = export_snapshot(LongTermStore(), tmp_path / "empty")
    assert m.count == 0
    assert import_snapshot(tmp_path / "empty", LongTermStore()).count == 0


def test_tampered_snapshot(tmp_path):
    s = LongTermStore()
    for e in random_envelopes(20, 2):
        s.append(e)
    path = tmp_path / "snap"
    export_snapshot(s, path)
    raw = bytearray(path.read_bytes())
    idx = raw.index(b"lost=") + 5 if b"lost=" in raw else 40
    raw[idx] = ord("7") if raw[idx] != ord("7") else ord("8")
    path.write_bytes(bytes(raw))
    with pytest.raises(SnapshotError, match="checksum"):
        import_snapshot(path, LongTermStore())


def test_truncated_snapshot(tmp_path):
    s = LongTermStore()
    for e in random_envelopes(5, 2):
        s.append(e)
    path = tmp_path / "snap"
    export_snapshot(s, path)
    lines = path.read_text().splitlines(keepends=True)
    path.write_text("".join(lines[:-1]))
    with pytest.raises(SnapshotError):
        import_snapshot(path, LongTermStore())


def test_log_persistence_and_reopen(tmp_path):
    path = str(tmp_path / "short.log")
    s = ShortTermStore(1000, path)
    envs = random_envelopes(50, 9, t_max=3000)
    for e in envs:
        s.append(e)
    s.prune(3000)
    kept = s.all()
    s.close()
    again = ShortTermStore(1000, path)
    assert again.all() == kept
    ro = LongTermStore(path, readonly=True)
    assert ro.all() == kept
    with pytest.raises(StoreError):
        ro.append(envs[0])
    with pytest.raises(StoreError):
        LongTermStore(str(tmp_path / "missing.log"), readonly=True)


def test_corrupt_log_reported(tmp_path):
    path = tmp_path / "bad.log"
    path.write_text("not an envelope\n")
    with pytest.raises(StoreError, match="bad.log:1"):
        LongTermStore(str(path))
