import json

import pytest

from raftws.core import LogEntry, Role, ServerState
from raftws.simnet import Schedule, check_invariants, random_schedule, run_schedule


def first_time(trace, kind, **match):
    for ev in trace:
        if ev.kind == kind and all(ev.payload.get(k) == v for k, v in match.items()):
            return ev.time_ms
    return None


def test_green_path_three_servers():
    r = run_schedule(3, Schedule(seed=1, proposals=[(500, "u1", "PUT", ["k", "v"])], duration_ms=2000))
    assert r.violations == []
    assert len(r.leaders()) == 1
    for st in r.states.values():
        assert st.commit_index == 1
        assert st.log[0].uid == "u1"
    assert r.proposals["u1"].done and r.proposals["u1"].result == "OK"
    assert all(nd.sm.entries == {"k": "v"} for nd in r.nodes.values())


@pytest.mark.parametrize("seed", range(5))
def test_leader_crash_reelection_bound(seed):
    sched = Schedule(seed=seed, crashes=[(500, "leader")], duration_ms=2500,
                     proposals=[(100, "a", "PUT", ["k", "1"]), (900, "b", "PUT", ["k", "2"])])
    r = run_schedule(5, sched)
    assert r.violations == []
    crash = [ev for ev in r.trace if ev.kind == "crash"][0]
    assert not crash.payload.get("skipped")
    elected = [ev.time_ms for ev in r.trace
               if ev.kind == "roleChange" and ev.payload["role"] == "Leader" and ev.time_ms > 500]
    assert elected and elected[0] - 500 <= 2 * 300
    assert r.proposals["b"].done


def test_minority_side_of_partition_never_commits():
    groups = [["s1", "s2"], ["s3", "s4", "s5"]]
    sched = Schedule(seed=4, partitions=[(0, groups)], duration_ms=3000,
                     proposals=[(t, f"u{t}", "PUT", ["k", str(t)]) for t in range(200, 2000, 150)])
    r = run_schedule(5, sched)
    assert r.violations == []
    appliers = {ev.payload["node"] for ev in r.trace if ev.kind == "apply"}
    assert appliers and appliers <= {"s3", "s4", "s5"}
    assert all(r.states[s].commit_index == 0 for s in ("s1", "s2"))


def test_same_seed_same_trace():
    sched = random_schedule(17)
    a = run_schedule(5, sched).trace_jsonl()
    b = run_schedule(5, sched).trace_jsonl()
    assert a == b
    assert run_schedule(5, random_schedule(18)).trace_jsonl() != a


def test_trace_lines_are_json():
    r = run_schedule(3, Schedule(seed=2, duration_ms=600))
    lines = r.trace_jsonl().splitlines()
    recs = [json.loads(line) for line in lines]
    assert [rec["seq"] for rec in recs] == list(range(len(recs)))
    assert all(set(rec) == {"timeMs", "seq", "kind", "payload"} for rec in recs)
    times = [rec["timeMs"] for rec in recs]
    assert times == sorted(times)


def test_schedule_round_trips_through_json(tmp_path):
    sched = random_schedule(5)
    path = tmp_path / "s.json"
    path.write_text(sched.to_json())
    assert Schedule.load(path) == sched


def test_schedule_rejects_bad_probability():
    with pytest.raises(ValueError):
        Schedule(drop_rate=1.5)


@pytest.mark.parametrize("seed", range(20))
def test_bounded_liveness_after_faults_cease(seed):
    base = random_schedule(seed, duration_ms=2000)
    quiet_from = 2000
    sched = Schedule(
        seed=seed,
        drop_rate=base.drop_rate,
        delay_range=base.delay_range,
        crashes=[(t, s) for t, s in base.crashes if s.startswith("s")][:2],
        restarts=[(quiet_from, s) for _, s in base.crashes if s.startswith("s")][:2],
        proposals=base.proposals,
        duration_ms=quiet_from + 10 * 300,
        quiet_after_ms=quiet_from,
    )
    r = run_schedule(5, sched)
    assert r.violations == []
    pending = [u for u, p in r.proposals.items() if not p.done]
    assert pending == []
    assert max(p.committed_ms for p in r.proposals.values()) <= quiet_from + 10 * 300
    assert len(r.leaders()) >= 1


def test_amnesia_restart_is_caught_and_durable_restart_is_safe():
    def sched(durable):
        return Schedule(seed=3, partitions=[(0, [["s1", "s2"], ["s3"]]), (900, [])],
                        crashes=[(800, "s2"), (900, "s1")], restarts=[(850, "s2")],
                        proposals=[(400, "a", "PUT", ["k", "a"]), (1500, "b", "PUT", ["k", "b"])],
                        duration_ms=3000, durable=durable)

    lossy = run_schedule(3, sched(False))
    assert {v.invariant for v in lossy.violations} == {"StateMachineSafety"}
    assert run_schedule(3, sched(True)).violations == []


# ---------------------------------------------------------- planted defects


def st(role=Role.FOLLOWER, term=1, log=(), commit=0, applied=0):
    entries = [LogEntry(i, t, uid, "PUT", ["k", uid]) for i, (t, uid) in enumerate(log, start=1)]
    return ServerState(role=role, current_term=term, log=entries, commit_index=commit, last_applied=applied)


def test_planted_log_matching_defect():
    a = st(log=[(1, "x"), (1, "y"), (2, "z")])
    b = st(log=[(1, "x"), (1, "DIFFERENT"), (2, "z")])
    found = check_invariants({"a": a, "b": b})
    assert [v.invariant for v in found] == ["LogMatching"]


def test_planted_two_leaders():
    found = check_invariants({"a": st(Role.LEADER, 4), "b": st(Role.LEADER, 4)})
    assert [v.invariant for v in found] == ["ElectionSafety"]


def test_clean_states_have_no_violations():
    log = [(1, "x"), (1, "y")]
    states = {"a": st(Role.LEADER, 2, log, 2, 2), "b": st(Role.FOLLOWER, 2, log, 1, 1),
              "c": st(Role.FOLLOWER, 2, log[:1])}
    assert check_invariants(states) == []


def test_planted_state_machine_divergence():
    a = st(log=[(1, "x")], commit=1, applied=1)
    b = st(term=2, log=[(2, "y")], commit=1, applied=1)
    found = check_invariants({"a": a, "b": b})
    assert [v.invariant for v in found] == ["StateMachineSafety"]


def test_planted_commit_beyond_log():
    found = check_invariants({"a": st(log=[(1, "x")], commit=3, applied=1)})
    assert [v.invariant for v in found] == ["Monotonicity"]
