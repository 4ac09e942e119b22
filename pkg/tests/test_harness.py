import json
import random

import pytest

from raftws.cli import build_parser, main as cli_main
from raftws.harness import (
    KILL_PLAN,
    ExperimentConfig,
    StatsRecord,
    average_records,
    compute_stats,
    emit_csv,
    run_once,
    unavailability_window,
)
from raftws.client import WorkloadResult


def test_constant_latency():
    assert compute_stats([[5.0] * 120], 1.0).latency_ms == 5.0


def test_head_is_discarded():
    assert compute_stats([[100.0] * 10 + [5.0] * 110], 1.0).latency_ms == 5.0


def test_tail_is_discarded():
    assert compute_stats([[5.0] * 110 + [900.0] * 10], 1.0).latency_ms == 5.0


def test_throughput_arithmetic():
    rec = compute_stats([[1.0] * 120 for _ in range(10)], 3.0)
    assert rec.throughput_ops == 400.0 and rec.clients == 10


def test_latency_pools_clients():
    rec = compute_stats([[2.0] * 30, [4.0] * 30], 1.0)
    assert rec.latency_ms == 3.0


def test_too_few_iterations():
    with pytest.raises(ValueError):
        compute_stats([[1.0] * 20], 1.0)


def test_csv_single_row(tmp_path):
    path = tmp_path / "r.csv"
    emit_csv([StatsRecord(10, 20.5, 430.2)], path)
    assert path.read_text() == "10 20.5 430.2\n"


def test_csv_sorted_by_clients(tmp_path):
    path = tmp_path / "r.csv"
    emit_csv([StatsRecord(25, 1, 2), StatsRecord(1, 3, 4), StatsRecord(5, 5, 6)], path)
    assert [line.split()[0] for line in path.read_text().splitlines()] == ["1", "5", "25"]


def test_csv_empty(tmp_path):
    path = tmp_path / "r.csv"
    emit_csv([], path)
    assert path.read_text() == ""


def test_csv_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        emit_csv([StatsRecord(1, 1, 1)], tmp_path / "missing" / "r.csv")


def test_average():
    avg = average_records([StatsRecord(5, 10, 100), StatsRecord(5, 20, 300)])
    assert avg == StatsRecord(5, 15, 200)


@pytest.mark.parametrize("servers, scenario", [(1, "1L"), (1, "1F"), (3, "2F"), (3, "1F1L"), (4, "1F1L")])
def test_incompatible_scenarios_rejected(servers, scenario):
    with pytest.raises(ValueError):
        ExperimentConfig(servers=servers, scenario=scenario)


def test_kill_plan_offsets():
    assert KILL_PLAN["1F1L"] == [(500, "follower"), (1000, "leader")]
    assert KILL_PLAN["2F"] == [(500, "follower"), (1000, "follower")]
    assert KILL_PLAN["0E"] == []


def test_unavailability_window():
    w1 = WorkloadResult("a", [], 0, 0, [1.0, 1.2, 2.5])
    w2 = WorkloadResult("b", [], 0, 0, [1.1, 2.1])
    assert unavailability_window([w1, w2], 1.5) == pytest.approx(900.0)
    assert unavailability_window([w1], 5.0) is None


def cfg(tmp_path, **kw):
    kw.setdefault("runs", 1)
    kw.setdefault("seed", 3)
    return ExperimentConfig(mcast_port=random.randint(20000, 60000), out_dir=str(tmp_path), **kw)


def test_single_server_baseline(tmp_path):
    r = run_once(cfg(tmp_path, servers=1, clients=1))
    assert r.audit.clean and not r.partial
    assert r.stats.clients == 1 and r.stats.latency_ms > 0
    saved = json.loads((tmp_path / "run-0" / "run.json").read_text())
    assert saved["audit"]["clean"] is True
    assert (tmp_path / "run-0" / "stats-server-0.json").exists()


def test_follower_failure_run_completes(tmp_path):
    # enough work to outlast the kill at 500 ms
    r = run_once(cfg(tmp_path, servers=3, clients=5, scenario="1F", iterations=600))
    assert not r.partial and r.audit.clean and r.audit.survivors == 2
    assert all(len(w.samples_ms) == 600 for w in r.workloads)
    (kill,) = r.kills
    assert kill.role == "follower" and kill.target != r.leader and kill.anomaly is None
    assert abs(kill.actual_ms - 500) <= 50


def test_two_follower_failures_lose_nothing(tmp_path):
    # enough work to outlast the second kill at 1000 ms
    r = run_once(cfg(tmp_path, servers=5, clients=5, scenario="2F", iterations=800))
    assert not r.partial and r.audit.clean and r.audit.survivors == 3
    assert r.audit.committed == 5 * 800
    assert [k.planned_ms for k in r.kills] == [500, 1000]
    assert all(abs(k.actual_ms - k.planned_ms) <= 50 for k in r.kills)


def test_follower_then_leader_failure(tmp_path):
    r = run_once(cfg(tmp_path, servers=5, clients=5, scenario="1F1L", iterations=800))
    assert not r.partial and r.audit.clean and r.audit.survivors == 3
    assert [k.role for k in r.kills] == ["follower", "leader"]
    assert r.unavailability_ms is not None


def test_cli_parses_run_flags():
    args = build_parser().parse_args(
        ["run", "--servers", "5", "--clients", "25", "--iterations", "120", "--scenario", "1F1L",
         "--runs", "5", "--out", "x", "--heartbeat-mode", "paper", "--mcast-group", "239.1.2.3",
         "--mcast-port", "4000", "--probe-window-ms", "250"])
    assert (args.servers, args.clients, args.scenario, args.heartbeat_mode) == (5, [25], "1F1L", "paper")
    assert (args.mcast_group, args.mcast_port, args.probe_window_ms) == ("239.1.2.3", 4000, 250)
    assert build_parser().parse_args(["run", "--clients", "10,1,5", "--out", "x"]).clients == [1, 5, 10]


def test_cli_sim_writes_trace(tmp_path, capsys):
    sched = tmp_path / "s.json"
    from raftws.simnet import random_schedule
    sched.write_text(random_schedule(4).to_json())
    trace = tmp_path / "t.jsonl"
    assert cli_main(["sim", "--servers", "5", "--schedule", str(sched), "--trace-out", str(trace)]) == 0
    lines = trace.read_text().splitlines()
    assert lines and all(json.loads(line)["kind"] for line in lines)
    assert json.loads(capsys.readouterr().out)["violations"] == []


def test_cli_run_writes_csv(tmp_path, capsys):
    port = str(random.randint(20000, 60000))
    assert cli_main(["run", "--servers", "1", "--clients", "1,2", "--iterations", "30", "--runs", "1",
                     "--out", str(tmp_path), "--mcast-port", port, "--seed", "1"]) == 0
    rows = (tmp_path / "raft_1s_0E.csv").read_text().splitlines()
    assert [r.split()[0] for r in rows] == ["1", "2"]


def test_kill_after_workload_end_is_recorded_as_skipped(tmp_path):
    r = run_once(cfg(tmp_path, servers=5, clients=1, scenario="2F", iterations=20))
    assert r.audit.clean and r.audit.survivors >= 4
    assert [k.planned_ms for k in r.kills] == [500, 1000]
    skipped = [k for k in r.kills if k.anomaly == "workload finished first"]
    assert skipped and all(k.target == "" for k in skipped)
