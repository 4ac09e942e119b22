"""Acceptance criteria, one test each; a PASS/FAIL line per criterion is
printed in the terminal summary."""

import ast
import functools
import hashlib
import random
import re
import statistics
import subprocess
import sys
import tempfile
import time
from pathlib import Path

from conftest import record
from raftws.harness import ExperimentConfig, run_trials
from raftws.simnet import Schedule, random_schedule, run_schedule
from raftws.statemachine import replay
from raftws.wire import decode, encode
from wiregen import rand_message

TESTS = Path(__file__).parent
MCAST_PORT = random.Random().randint(20000, 60000)
OUT = Path(tempfile.mkdtemp(prefix="raftbench-acceptance-"))
SAFETY = {"ElectionSafety", "LogMatching", "LeaderAppendOnly", "StateMachineSafety"}


# ------------------------------------------------------------ 1. safety soak


def test_c1_safety_soak():
    t0 = time.monotonic()
    bad = {}
    for seed in range(1000):
        sched = random_schedule(seed, n=5)
        assert sched.drop_rate <= 0.2 and sched.delay_range[1] <= 150 and len(sched.crashes) <= 2
        r = run_schedule(5, sched, record_trace=False)
        if r.violations:
            bad[seed] = sorted({v.invariant for v in r.violations})
    elapsed = time.monotonic() - t0
    safety_bad = {s: v for s, v in bad.items() if SAFETY & set(v)}
    ok = not bad and elapsed < 300
    record("C1 safety soak", ok, f"1000 schedules, {len(safety_bad)} with safety violations "
           f"({len(bad)} with any), {elapsed:.1f} s")
    assert not bad, bad
    assert elapsed < 300


# ------------------------------------------------------------ 2. determinism


def test_c2_determinism():
    mismatched = []
    for seed in range(100):
        sched = random_schedule(seed)
        a = hashlib.sha256(run_schedule(5, sched).trace_jsonl().encode()).digest()
        b = hashlib.sha256(run_schedule(5, sched).trace_jsonl().encode()).digest()
        if a != b:
            mismatched.append(seed)
    record("C2 determinism", not mismatched, f"100 seeds run twice, {len(mismatched)} trace mismatches")
    assert mismatched == []


# ------------------------------------------------------------ 3. replay oracle


def replay_schedule(seed):
    rng = random.Random(f"replay/{seed}")
    base = random_schedule(seed)
    props = []
    # headroom for the no-op barriers new leaders append
    for k in range(rng.randint(1, 470)):
        key = f"k{rng.randrange(20)}"
        r = rng.random()
        if r < 0.6:
            cmd, params = "PUT", [key, str(k)]
        elif r < 0.9:
            cmd, params = "DEL", [key]
        else:
            cmd, params = rng.choice(["PUT", "DEL", "BOGUS"]), [key] * rng.randint(0, 3)
        props.append((rng.randint(0, 2800), f"r{seed}-{k}", cmd, params))
    quiet = 3000
    # crashed servers come back once the network calms down, so every replica catches up
    named = [s for _, s in base.crashes if s.startswith("s")]
    return Schedule(
        seed=seed, drop_rate=base.drop_rate, delay_range=base.delay_range, partitions=base.partitions,
        crashes=base.crashes, restarts=sorted(base.restarts + [(quiet, s) for s in named]),
        proposals=sorted(props), duration_ms=quiet + 5000, quiet_after_ms=quiet, quiet_delay_range=(1, 10),
    )


def test_c3_replay_oracle():
    failures, sizes = [], []
    for seed in range(100):
        r = run_schedule(5, replay_schedule(seed), record_trace=False)
        live = [sid for sid, st in r.states.items() if st is not None]
        longest = max((r.states[sid] for sid in live), key=lambda st: st.commit_index)
        log = longest.log[:longest.commit_index]
        sizes.append(len(log))
        fresh = replay(log).snapshot()
        if r.violations or any(r.nodes[sid].sm.snapshot() != fresh for sid in live):
            failures.append(seed)
    ok = not failures and max(sizes) <= 500
    record("C3 replay oracle", ok, f"100 committed logs ({min(sizes)}..{max(sizes)} entries), "
           f"{len(failures)} replicas differing from fresh replay")
    assert failures == []
    assert max(sizes) <= 500


# ------------------------------------------------------------ harness runs


@functools.lru_cache(maxsize=None)
def trials(servers, clients, scenario):
    cfg = ExperimentConfig(servers=servers, clients=clients, scenario=scenario, iterations=120, runs=5,
                           seed=servers * 1000 + clients, mcast_port=MCAST_PORT,
                           out_dir=str(OUT / f"{scenario}-{servers}s-{clients}c"))
    return run_trials(cfg)


def mean(runs, attr):
    return statistics.fmean(getattr(r.stats, attr) for r in runs)


def test_c4_exactly_once_under_leader_failure():
    runs = trials(3, 10, "1L")
    good = [r for r in runs if not r.partial and r.audit.clean and r.audit.committed == 1200
            and [k.role for k in r.kills] == ["leader"] and r.kills[0].target == r.leader]
    detail = "; ".join(f"run {r.index}: {r.audit.committed}/{r.audit.issued} committed, dup={r.audit.duplicates}, "
                       f"missing={r.audit.missing}, identical={r.audit.states_identical}" for r in runs)
    record("C4 exactly-once (3S/10C/1L)", len(good) == 5, f"{len(good)}/5 clean runs [{detail}]")
    assert len(good) == 5


def test_c5a_single_server_latency_below_three():
    rows = []
    for c in (1, 5, 10, 25):
        one, three = mean(trials(1, c, "0E"), "latency_ms"), mean(trials(3, c, "0E"), "latency_ms")
        rows.append((c, one, three))
    ok = all(one < three for _, one, three in rows)
    record("C5a 1S latency < 3S latency", ok,
           ", ".join(f"{c}C: {one:.2f} vs {three:.2f} ms" for c, one, three in rows))
    assert ok


def test_c5b_follower_failure_throughput():
    base, failed = mean(trials(3, 10, "0E"), "throughput_ops"), mean(trials(3, 10, "1F"), "throughput_ops")
    ok = failed >= 0.9 * base
    record("C5b 1F throughput >= 90% of 0E (3S/10C)", ok,
           f"{failed:.1f} vs {base:.1f} ops/s ({100 * failed / base:.1f}%)")
    assert ok


def test_c5c_leader_failure_unavailability():
    windows = [r.unavailability_ms for r in trials(3, 10, "1L")]
    ok = all(w is not None and w <= 1600 for w in windows)
    record("C5c 1L unavailability <= 1.6 s", ok,
           ", ".join("n/a" if w is None else f"{w:.0f} ms" for w in windows))
    assert ok


# ------------------------------------------------------------ 6. conformance


# every example marked trivially-checkable, mapped to the unit test covering it
TRIVIAL_EXAMPLES = [
    "test_core.py::test_observe_equal_term_is_noop",
    "test_core.py::test_observe_higher_term_steps_leader_down",
    "test_core.py::test_observe_stale_term_ignored",
    "test_core.py::test_vote_rejected_for_stale_term",
    "test_core.py::test_vote_granted_on_empty_logs",
    "test_core.py::test_one_vote_per_term",
    "test_core.py::test_heartbeat_on_empty_log_succeeds",
    "test_core.py::test_append_missing_prev_entry_rejected",
    "test_core.py::test_commit_index_takes_min_of_leader_commit_and_last_index",
    "test_core.py::test_startup_election",
    "test_core.py::test_split_vote_reelection",
    "test_core.py::test_two_of_three_is_majority",
    "test_core.py::test_two_of_five_is_not_majority",
    "test_core.py::test_vote_with_higher_term_forces_step_down",
    "test_core.py::test_follower_redirects",
    "test_core.py::test_duplicate_uid_returns_prior_result",
    "test_core.py::test_first_ack_commits_in_three_server_cluster",
    "test_core.py::test_failure_decrements_next_index",
    "test_core.py::test_higher_term_ack_steps_down_without_commit",
    "test_core.py::test_fresh_leader_heartbeat_is_empty",
    "test_core.py::test_heartbeat_carries_suffix",
    "test_core.py::test_apply_is_identity_when_caught_up",
    "test_core.py::test_apply_in_order",
    "test_core.py::test_majority",
    "test_statemachine.py::test_init_is_empty",
    "test_statemachine.py::test_insert_after_terminate_fails",
    "test_statemachine.py::test_two_machines_are_independent",
    "test_statemachine.py::test_put_on_empty",
    "test_statemachine.py::test_del_missing",
    "test_wire.py::test_empty_append_entries_round_trips",
    "test_wire.py::test_decode_empty_is_error",
    "test_transport.py::test_call_live_echo",
    "test_transport.py::test_call_unbound_port_is_connection_error",
    "test_transport.py::test_broadcast_one_dead_target",
    "test_transport.py::test_broadcast_rejects_empty_targets",
    "test_discovery.py::test_hello_reaches_other_listener",
    "test_discovery.py::test_bye_drops_sender",
    "test_discovery.py::test_foreign_device_type_ignored_by_listeners",
    "test_discovery.py::test_probe_with_nobody_listening_is_empty",
    "test_discovery.py::test_probe_deduplicates_matches",
    "test_discovery.py::test_hello_on_empty_table",
    "test_discovery.py::test_bye_for_unknown_leaves_table_unchanged",
    "test_discovery.py::test_hello_twice_refreshes_last_seen",
    "test_client.py::test_discover_nothing_raises",
    "test_client.py::test_duplicate_detection_keeps_known_size",
    "test_client.py::test_target_is_leader_one_round_trip",
    "test_client.py::test_follower_redirects_to_leader",
    "test_client.py::test_zero_iterations_notifies_immediately",
    "test_simnet.py::test_minority_side_of_partition_never_commits",
    "test_simnet.py::test_planted_log_matching_defect",
    "test_simnet.py::test_planted_two_leaders",
    "test_simnet.py::test_clean_states_have_no_violations",
    "test_harness.py::test_constant_latency",
    "test_harness.py::test_head_is_discarded",
    "test_harness.py::test_throughput_arithmetic",
    "test_harness.py::test_csv_single_row",
    "test_harness.py::test_csv_sorted_by_clients",
    "test_harness.py::test_csv_empty",
]

DERIVED_ORACLES = [
    "test_core.py::test_conflicting_suffix_is_truncated",         # log-matching hand trace
    "test_wire.py::test_thousand_entry_append_round_trips",        # round-trip fuzz
    "test_wire.py::test_random_messages_round_trip",
    "test_wire.py::test_append_entries_round_trip_property",
    "test_transport.py::test_silent_endpoint_times_out_on_time",   # timing harness
    "test_transport.py::test_broadcast_overlaps_calls",
]


def count_asserts(node_id: str) -> int:
    path, name = node_id.split("::")
    tree = ast.parse((TESTS / path).read_text())
    fn = next(n for n in tree.body if isinstance(n, ast.FunctionDef) and n.name == name)
    return sum(isinstance(n, ast.Assert) for n in ast.walk(fn))


def test_c6_conformance_micro_suite():
    ids = TRIVIAL_EXAMPLES + DERIVED_ORACLES
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *ids],
                          cwd=TESTS, capture_output=True, text=True, timeout=600)
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr
    passed = int(m.group(1)) if (m := re.search(r"(\d+) passed", tail)) else 0
    asserts = sum(count_asserts(i) for i in TRIVIAL_EXAMPLES)
    ok = proc.returncode == 0 and asserts >= 40
    record("C6 conformance micro-suite", ok,
           f"{len(TRIVIAL_EXAMPLES)} example tests ({asserts} assertions) + {len(DERIVED_ORACLES)} oracle tests: "
           f"{passed} passed, pytest exit {proc.returncode}")
    assert proc.returncode == 0, proc.stdout[-3000:]
    assert asserts >= 40


# ------------------------------------------------------------ 7. wire fuzz


def test_c7_wire_round_trip_fuzz():
    rng = random.Random(20240607)
    failures = 0
    for _ in range(100_000):
        m = rand_message(rng)
        if decode(encode(m)) != m:
            failures += 1
    record("C7 wire round-trip fuzz", failures == 0, f"100000 messages, {failures} failures")
    assert failures == 0
