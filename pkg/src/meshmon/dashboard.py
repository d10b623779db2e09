"""Pairwise status matrix, rendered as fixed-width text or static HTML.

Cell status comes from the same monitors and thresholds the alerting path
uses; nothing here has its own threshold logic.
"""

from __future__ import annotations

import html
from dataclasses import dataclass
from typing import Optional

from . import analytics
from .store import QueryFilter

STATUS_CODES = {"ok": "O", "warn": "W", "crit": "C", "stale": "S", "nodata": "-"}
DIAGONAL = "\\"
_COLOURS = {"ok": "#2e7d32", "warn": "#f9a825", "crit": "#c62828", "stale": "#6a1b9a",
            "nodata": "#9e9e9e"}


@dataclass(frozen=True)
class MatrixCell:
    src: str
    dst: str
    status: str
    latest: Optional[float] = None


def _series(store, src, dst, kind):
    return [e.payload for e in store.query(QueryFilter(src=src, dst=dst, metric_kind=kind))]


def _status_for(series, kind, thresholds):
    if kind == "latency":
        _, level = analytics.scan_loss(series, thresholds)
        status = {"critical": "crit", "warn": "warn", None: "ok"}[level]
        return status, series[-1].loss_fraction
    if kind == "throughput":
        _, degraded = analytics.scan_throughput(series, thresholds)
        return ("crit" if degraded else "ok"), series[-1].achieved_throughput
    mon = analytics.PathMonitor(("", ""), thresholds)
    for pm in series:
        mon.update(pm, pm.start_time)
    return ("warn" if mon.mtu_violating else "ok"), mon.latest_mtu


def stale_hosts(store, hosts, now, thresholds, repeat_intervals, poll_period=0):
    latest = store.latest_stored_by_agent()
    due = {h: repeat_intervals[h] for h in hosts if h in repeat_intervals}
    alerts = analytics.check_agent_freshness(
        {h: latest.get(h) for h in due}, now, thresholds.stale_k, due, poll_period)
    return {a.subject[0] for a in alerts}


def build_matrix(store, metric_kind, thresholds, hosts, now, repeat_intervals, poll_period=0):
    """Rows of :class:`MatrixCell` (None on the diagonal)."""
    stale = stale_hosts(store, hosts, now, thresholds, repeat_intervals, poll_period)
    rows = []
    for src in hosts:
        row = []
        for dst in hosts:
            if src == dst:
                row.append(None)
                continue
            if src in stale or dst in stale:
                row.append(MatrixCell(src, dst, "stale"))
                continue
            series = _series(store, src, dst, metric_kind)
            if not series:
                row.append(MatrixCell(src, dst, "nodata"))
                continue
            status, latest = _status_for(series, metric_kind, thresholds)
            row.append(MatrixCell(src, dst, status, latest))
        rows.append(row)
    return rows


def render_text(rows, hosts, metric_kind):
    width = max(len(h) for h in hosts)
    idx = [str(i) for i in range(len(hosts))]
    col = max(len(i) for i in idx) + 1
    out = [f"{metric_kind} matrix (rows: source, columns: destination)"]
    out.append(" " * (width + 4) + "".join(i.rjust(col) for i in idx))
    for n, (src, row) in enumerate(zip(hosts, rows)):
        codes = "".join((DIAGONAL if c is None else STATUS_CODES[c.status]).rjust(col) for c in row)
        out.append(f"{idx[n].rjust(2)} {src.ljust(width)} {codes}")
    out.append("legend: " + " ".join(f"{v}={k}" for k, v in STATUS_CODES.items()))
    return "\n".join(out) + "\n"


def _fmt_latest(v):
    return "" if v is None else analytics.fmt_value(v)


def render_html(rows, hosts, metric_kind):
    esc = html.escape
    style = "".join(f"td.{k}{{background:{c};color:#fff}}" for k, c in _COLOURS.items())
    parts = [
        "<!DOCTYPE html>",
        f"<html><head><meta charset=\"utf-8\"><title>{esc(metric_kind)} matrix</title>",
        "<style>table{border-collapse:collapse;font-family:monospace}"
        "td,th{border:1px solid #ccc;padding:4px 8px;text-align:center}"
        f"td.diag{{background:#eee}}{style}</style></head><body>",
        f"<h1>{esc(metric_kind)} matrix</h1>",
        "<table><tr><th>src \\ dst</th>" + "".join(f"<th>{esc(h)}</th>" for h in hosts) + "</tr>",
    ]
    for src, row in zip(hosts, rows):
        cells = []
        for c in row:
            if c is None:
                cells.append('<td class="diag"></td>')
            else:
                cells.append(
                    f'<td class="{c.status}" data-status="{c.status}" '
                    f'title="{esc(c.src)} to {esc(c.dst)}">'
                    f"{STATUS_CODES[c.status]} {esc(_fmt_latest(c.latest))}</td>")
        parts.append(f"<tr><th>{esc(src)}</th>{''.join(cells)}</tr>")
    parts.append("</table></body></html>")
    return "\n".join(parts) + "\n"


def render_matrix(store, metric_kind, thresholds, hosts, now, repeat_intervals, poll_period=0):
    """Returns ``(text, html)`` for one metric kind."""
    rows = build_matrix(store, metric_kind, thresholds, hosts, now, repeat_intervals, poll_period)
    return render_text(rows, hosts, metric_kind), render_html(rows, hosts, metric_kind)
