import io
import shutil
from pathlib import Path

import pytest

from meshmon import cli
from meshmon.analytics import Alert
from meshmon.collector import MeasurementEnvelope
from meshmon.errors import ValidationError
from meshmon.scenario import load_scenario

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def run_cli(*argv):
    out = io.StringIO()
    code = cli.main([str(a) for a in argv], out)
    return code, out.getvalue()


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("runs")
    out = {}
    for name in ("clean", "route_change", "soft_failure"):
        code, text = run_cli("run", SCENARIOS / name / "scenario.yaml", "--out", base / name)
        assert code == 0, text
        out[name] = base / name
    return out


def halted_scenario(tmp_path):
    src = SCENARIOS / "clean"
    for f in ("topology.txt", "mesh.yaml"):
        shutil.copy(src / f, tmp_path / f)
    (tmp_path / "scenario.yaml").write_text(
        "topology: topology.txt\nmesh: mesh.yaml\nduration_s: 5400\n"
        "events:\n  - {at_s: 3000, type: agent_halt, host: ps-umich}\n")
    return tmp_path / "scenario.yaml"


def test_clean_run_outputs(runs):
    d = runs["clean"]
    for name in ("shortterm.log", "longterm.log", "alerts.log", "run.json", "longterm.snapshot"):
        assert (d / name).exists()
    assert (d / "alerts.log").read_text() == ""
    assert len((d / "longterm.log").read_text().splitlines()) > 0


def test_route_change_run_single_alert(runs):
    code, text = run_cli("alerts", "--out", runs["route_change"])
    alerts = [Alert.from_line(l) for l in text.splitlines()]
    assert code == 0 and [a.kind for a in alerts] == ["route_change"]
    assert alerts[0].subject == ("ps-cern", "ps-umich")


def test_query_filters(runs):
    code, text = run_cli("query", "--out", runs["clean"], "--src", "ps-cern", "--dst", "ps-fnal",
                         "--kind", "latency")
    envs = [MeasurementEnvelope.from_line(l) for l in text.splitlines()]
    assert code == 0 and envs
    assert all((e.src, e.dst, e.metric_kind) == ("ps-cern", "ps-fnal", "latency") for e in envs)
    starts = [e.start_time for e in envs]
    assert starts == sorted(starts)


def test_query_disjoint_range_empty(runs):
    assert run_cli("query", "--out", runs["clean"], "--from", 10**9, "--to", 10**9 + 5) == (0, "")


@pytest.mark.parametrize("argv", [
    ["query", "--out", "x", "--from", "soon"],
    ["query", "--out", "x", "--from", "10", "--to", "5"],
    ["bogus"],
    [],
])
def test_usage_errors_exit_2(argv, runs):
    if "x" in argv:
        argv = [str(runs["clean"]) if a == "x" else a for a in argv]
    assert run_cli(*argv)[0] == 2


def test_missing_store_is_usage_error(tmp_path):
    assert run_cli("query", "--out", tmp_path)[0] == 2
    assert run_cli("alerts", "--out", tmp_path)[0] == 2


def test_bad_scenario_is_runtime_error(tmp_path):
    (tmp_path / "scenario.yaml").write_text("topology: nope.txt\nmesh: nope.yaml\n")
    assert run_cli("run", tmp_path / "scenario.yaml", "--out", tmp_path / "o")[0] == 1


def test_config_error_before_simulation(tmp_path):
    path = halted_scenario(tmp_path)
    path.write_text(path.read_text().replace("ps-umich", "ps-nowhere"))
    with pytest.raises(ValidationError):
        load_scenario(path)
    assert not (tmp_path / "out").exists()


def test_alerts_filter_by_kind(runs):
    d = runs["soft_failure"]
    code, text = run_cli("alerts", "--out", d)
    kinds = sorted(Alert.from_line(l).kind for l in text.splitlines())
    assert kinds == ["loss_anomaly", "throughput_degradation"]
    code, text = run_cli("alerts", "--out", d, "--kind", "loss_anomaly")
    assert [Alert.from_line(l).kind for l in text.splitlines()] == ["loss_anomaly"]
    assert run_cli("alerts", "--out", d, "--kind", "mtu_violation") == (0, "")
    assert run_cli("alerts", "--out", d, "--since", 10**9) == (0, "")


def matrix_codes(text):
    rows = {}
    for line in text.splitlines()[2:-1]:
        parts = line.split()
        rows[parts[1]] = parts[2:]
    return rows


def test_matrix_clean_all_ok(runs, tmp_path):
    html_path = tmp_path / "m.html"
    code, text = run_cli("matrix", "--out", runs["clean"], "--kind", "latency", "--html", html_path)
    assert code == 0
    rows = matrix_codes(text)
    assert all(c in ("O", "\\") for r in rows.values() for c in r)
    page = html_path.read_text()
    assert page.count('data-status="ok"') == 6 and "<script" not in page


def test_matrix_text_and_html_agree(runs, tmp_path):
    for kind in ("latency", "throughput", "path"):
        html_path = tmp_path / f"{kind}.html"
        _, text = run_cli("matrix", "--out", runs["soft_failure"], "--kind", kind, "--html", html_path)
        page = html_path.read_text()
        codes = [c for r in matrix_codes(text).values() for c in r if c != "\\"]
        statuses = [s.split('"')[0] for s in page.split('data-status="')[1:]]
        letter = {"ok": "O", "warn": "W", "crit": "C", "stale": "S", "nodata": "-"}
        assert codes == [letter[s] for s in statuses]


def test_matrix_halted_agent_stale(tmp_path):
    scen = halted_scenario(tmp_path)
    assert run_cli("run", scen, "--out", tmp_path / "o")[0] == 0
    _, text = run_cli("matrix", "--out", tmp_path / "o")
    rows = matrix_codes(text)
    assert rows["ps-umich"] == ["S", "S", "\\"]
    assert rows["ps-cern"] == ["\\", "O", "S"]
    _, alerts = run_cli("alerts", "--out", tmp_path / "o", "--kind", "stale_agent")
    (a,) = [Alert.from_line(l) for l in alerts.splitlines()]
    # halted at 3000 s; threshold is 3 x 300 s, checked every 60 s
    assert a.subject == ("ps-umich",) and 3000_000 < a.raised_at <= 3000_000 + 4 * 300_000


def test_paths_report(runs):
    code, text = run_cli("paths", "--out", runs["route_change"], "ps-cern", "ps-umich")
    assert code == 0
    blocks = [l for l in text.splitlines() if l.startswith("path ")]
    assert len(blocks) == 2
    assert "hops: C" in text and "hops: D -> C" in text
    counts = [int(l.split()[1]) for l in text.splitlines() if l.strip().startswith("count:")]
    assert sum(counts) == 12
    code, text = run_cli("paths", "--out", runs["clean"], "ps-cern", "ps-fnal")
    assert text.count("path ") == 1
    assert run_cli("paths", "--out", runs["clean"], "ps-x", "ps-y") == (0, "no data for ps-x -> ps-y\n")


def test_jobs_command(tmp_path):
    log = tmp_path / "jobs.log"
    geo = tmp_path / "geo.csv"
    log.write_text(
        "ts=2020-01-15T12:00:00Z submit=s1 worker=10.2.3.4 bytes=100 lost_pkts=0 reorders=0 duration_s=1\n"
        "ts=2020-01-15T12:00:01Z submit=s1 worker=10.9.0.1 bytes=200 lost_pkts=0 reorders=0 duration_s=1\n"
        "ts=2020-01-15T12:00:02Z submit=s1 worker=192.0.2.7 bytes=50 lost_pkts=0 reorders=0 duration_s=1\n"
        "broken line\n")
    geo.write_text("10.0.0.0/8,US-Central,39,-95\n10.2.0.0/16,US-Midwest,42,-88\n")
    assert run_cli("jobs", log, "--geo", geo) == (0, "US-Central\t200\t1\nUS-Midwest\t100\t1\nunlocated\t50\t1\n")
    code, text = run_cli("jobs", log, "--group-by", "worker_prefix", "--prefix-len", "8")
    assert text == "10.0.0.0/8\t300\t2\n192.0.0.0/8\t50\t1\n"
    code, text = run_cli("jobs", log, "--geo", geo, "--points")
    assert text.splitlines() == ["42.0\t-88.0\tUS-Midwest\t100", "39.0\t-95.0\tUS-Central\t200"]
    assert run_cli("jobs", log)[0] == 2   # region grouping needs a geo table
    assert run_cli("jobs", tmp_path / "missing.log")[0] == 1


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "meshmon", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "matrix" in res.stdout
