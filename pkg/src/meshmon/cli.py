"""meshmon command line.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import analytics, dashboard, jobsingest, scenario
from .errors import MeshmonError
from .store import LongTermStore, QueryFilter

log = logging.getLogger("meshmon")

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _store_path(args):
    name = scenario.SHORT_LOG if getattr(args, "tier", "long") == "short" else scenario.LONG_LOG
    return os.path.join(args.out, name)


def _open_store(args):
    path = _store_path(args)
    if not os.path.exists(path):
        raise UsageError(f"no store at {path}")
    return LongTermStore(path, readonly=True)


def _load_meta(outdir):
    path = os.path.join(outdir, scenario.RUN_META)
    if not os.path.exists(path):
        raise UsageError(f"no run metadata at {path}; run a scenario first")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def cmd_run(args, out):
    alerts = scenario.run_scenario(args.scenario, args.out, args.duration)
    counts = {}
    for a in alerts:
        counts[a.kind] = counts.get(a.kind, 0) + 1
    summary = ", ".join(f"{k}={v}" for k, v in sorted(counts.items())) or "none"
    out.write(f"run complete: {len(alerts)} alerts ({summary}); outputs in {args.out}\n")
    return EXIT_OK


def cmd_query(args, out):
    try:
        f = QueryFilter(args.src, args.dst, args.kind, args.t0, args.t1)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    store = _open_store(args)
    for env in store.query(f):
        out.write(env.to_line() + "\n")
    return EXIT_OK


def cmd_alerts(args, out):
    path = os.path.join(args.out, scenario.ALERT_LOG)
    if not os.path.exists(path):
        raise UsageError(f"no alert log at {path}")
    alerts = analytics.read_alert_log(path, since=args.since, kind=args.kind)
    alerts.sort(key=lambda a: a.raised_at)
    for a in alerts:
        out.write(a.to_line() + "\n")
    return EXIT_OK


def cmd_matrix(args, out):
    meta = _load_meta(args.out)
    store = _open_store(args)
    th = analytics.Thresholds(**meta["thresholds"])
    now = args.now if args.now is not None else meta["end_time"]
    text, page = dashboard.render_matrix(
        store, args.kind, th, meta["hosts"], now, meta["repeat_intervals_ms"],
        meta["poll_period_ms"])
    out.write(text)
    if args.html:
        with open(args.html, "w", encoding="utf-8") as fh:
            fh.write(page)
    return EXIT_OK


def format_paths(counts):
    lines = []
    for n, c in enumerate(counts, start=1):
        lines.append(f"path {n}: {c.signature.signature}")
        lines.append(f"  hops: {' -> '.join(c.signature.hop_list)}")
        lines.append(f"  count: {c.count}  first_seen: {c.first_seen}  last_seen: {c.last_seen}")
    return "\n".join(lines) + "\n"


def cmd_paths(args, out):
    store = _open_store(args)
    envs = store.query(QueryFilter(args.src, args.dst, "path"))
    window = (args.t0, args.t1) if args.t1 is not None else (args.t0, float("inf"))
    counts = analytics.distinct_paths([e.payload for e in envs], window)
    if not counts:
        out.write(f"no data for {args.src} -> {args.dst}\n")
        return EXIT_OK
    out.write(format_paths(counts))
    return EXIT_OK


def cmd_jobs(args, out):
    stats = jobsingest.ParseStats()
    with open(args.log, encoding="utf-8") as fh:
        records = jobsingest.parse_lines(fh, stats)
    if args.geo:
        table = jobsingest.load_geo_table(args.geo)
        records = [jobsingest.geo_annotate(r, table) for r in records]
    elif args.group_by == "region":
        raise UsageError("--group-by region needs --geo")
    if args.points:
        out.write(jobsingest.format_points(records))
    else:
        rows = jobsingest.aggregate_bytes_by_destination(records, args.group_by, args.prefix_len)
        out.write(jobsingest.format_aggregate(rows))
    if stats.errors or stats.unknown_keys:
        log.warning("jobs: %d lines, %d skipped, %d unknown keys",
                    stats.lines, stats.errors, stats.unknown_keys)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="meshmon", description="Mesh network monitoring simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario end to end")
    r.add_argument("scenario")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--duration", type=float, help="simulated seconds (overrides scenario)")
    r.set_defaults(func=cmd_run)

    def store_args(sp):
        sp.add_argument("--out", required=True, help="run output directory")
        sp.add_argument("--tier", choices=("long", "short"), default="long")

    q = sub.add_parser("query", help="print stored envelopes")
    store_args(q)
    q.add_argument("--src")
    q.add_argument("--dst")
    q.add_argument("--kind", choices=("latency", "throughput", "path"))
    q.add_argument("--from", dest="t0", type=int, default=0, help="start ms (inclusive)")
    q.add_argument("--to", dest="t1", type=int, help="end ms (exclusive)")
    q.set_defaults(func=cmd_query)

    a = sub.add_parser("alerts", help="list alerts")
    a.add_argument("--out", required=True)
    a.add_argument("--since", type=int, help="only alerts raised at or after this ms")
    a.add_argument("--kind", choices=analytics.ALERT_KINDS)
    a.set_defaults(func=cmd_alerts)

    m = sub.add_parser("matrix", help="render the pairwise status matrix")
    store_args(m)
    m.add_argument("--kind", choices=("latency", "throughput", "path"), default="latency")
    m.add_argument("--html", help="also write a static HTML page here")
    m.add_argument("--now", type=int, help="evaluation time in ms (default: run end)")
    m.set_defaults(func=cmd_matrix)

    pa = sub.add_parser("paths", help="distinct paths between two hosts")
    store_args(pa)
    pa.add_argument("src")
    pa.add_argument("dst")
    pa.add_argument("--from", dest="t0", type=int, default=0)
    pa.add_argument("--to", dest="t1", type=int)
    pa.set_defaults(func=cmd_paths)

    j = sub.add_parser("jobs", help="aggregate job-transfer statistics")
    j.add_argument("log")
    j.add_argument("--geo", help="prefix,region,lat,lon table")
    j.add_argument("--group-by", choices=("region", "worker_prefix"), default="region")
    j.add_argument("--prefix-len", type=int, default=24)
    j.add_argument("--points", action="store_true", help="emit located points instead")
    j.set_defaults(func=cmd_jobs)
    return p


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, out)
    except UsageError as exc:
        sys.stderr.write(f"meshmon: {exc}\n")
        return EXIT_USAGE
    except (MeshmonError, OSError, ValueError) as exc:
        sys.stderr.write(f"meshmon: error: {exc}\n")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
