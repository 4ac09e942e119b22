"""``raftbench``: run experiments, simulations and servers from the shell."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from raftws.discovery import MCAST_GROUP, MCAST_PORT, PROBE_WINDOW_MS
from raftws.harness import SCENARIOS, ExperimentConfig, average_records, emit_csv, run_trials
from raftws.simnet import Schedule, random_schedule, run_schedule


def _client_counts(text: str) -> list[int]:
    try:
        counts = sorted({int(x) for x in text.split(",") if x})
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}") from None
    if not counts or min(counts) < 1:
        raise argparse.ArgumentTypeError("client counts must be positive")
    return counts


def _read_hosts(path: str) -> list[str]:
    lines = Path(path).read_text().splitlines()
    return [ln.split("#", 1)[0].strip() for ln in lines if ln.split("#", 1)[0].strip()]


def cmd_run(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hosts = _read_hosts(args.hosts) if args.hosts else None
    rows = []
    failed = False
    for clients in args.clients:
        cfg = ExperimentConfig(
            servers=args.servers, clients=clients, iterations=args.iterations, scenario=args.scenario,
            runs=args.runs, heartbeat_mode=args.heartbeat_mode, seed=args.seed,
            mcast_group=args.mcast_group, mcast_port=args.mcast_port, probe_window_ms=args.probe_window_ms,
            hosts=hosts, out_dir=str(out / f"{args.scenario}-{args.servers}s-{clients}c"),
        )
        runs = run_trials(cfg)
        for r in runs:
            flag = "" if r.audit.clean and not r.partial else "  FLAGGED"
            if any(k.anomaly for k in r.kills):
                flag += "  kills: " + ", ".join(f"{k.role}@{k.planned_ms}ms {k.anomaly}" for k in r.kills if k.anomaly)
            lat = f"{r.stats.latency_ms:.2f} ms" if r.stats else "n/a"
            thr = f"{r.stats.throughput_ops:.1f} ops/s" if r.stats else "n/a"
            print(f"clients={clients} run={r.index} latency={lat} throughput={thr} "
                  f"committed={r.audit.committed}/{r.audit.issued}{flag}")
            failed |= bool(flag)
        stats = [r.stats for r in runs if r.stats is not None]
        if stats:
            rows.append(average_records(stats))
    csv = out / f"raft_{args.servers}s_{args.scenario}.csv"
    emit_csv(rows, csv)
    print(f"wrote {csv}")
    return 1 if failed else 0


def cmd_sim(args) -> int:
    if args.schedule:
        sched = Schedule.load(args.schedule)
    else:
        sched = random_schedule(args.seed, n=args.servers)
    result = run_schedule(args.servers, sched)
    if args.trace_out:
        Path(args.trace_out).write_text(result.trace_jsonl())
    summary = {
        "events": len(result.trace),
        "leaders": result.leaders(),
        "committed": {sid: (st.commit_index if st is not None else None) for sid, st in result.states.items()},
        "violations": [v.__dict__ for v in result.violations],
    }
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 1 if result.violations else 0


def cmd_soak(args) -> int:
    bad = 0
    for seed in range(args.start, args.start + args.seeds):
        r = run_schedule(args.servers, random_schedule(seed, n=args.servers), record_trace=False)
        if r.violations:
            bad += 1
            print(f"seed {seed}: {[v.invariant for v in r.violations]}")
    print(f"{args.seeds} schedules, {bad} with violations")
    return 1 if bad else 0


def cmd_serve(args) -> int:
    from raftws import server
    return server.main(args.rest)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="raftbench", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="benchmark real server processes")
    run.add_argument("--servers", type=int, default=3)
    run.add_argument("--clients", type=_client_counts, default=[1],
                     help="client count, or a comma-separated list (one CSV row each)")
    run.add_argument("--iterations", type=int, default=120)
    run.add_argument("--scenario", choices=SCENARIOS, default="0E")
    run.add_argument("--runs", type=int, default=5)
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--hosts", help="file of host:port lines for servers started with 'raftbench serve'")
    run.add_argument("--heartbeat-mode", choices=("safe", "paper"), default="safe")
    run.add_argument("--seed", type=int)
    run.add_argument("--mcast-group", default=MCAST_GROUP)
    run.add_argument("--mcast-port", type=int, default=MCAST_PORT)
    run.add_argument("--probe-window-ms", type=int, default=PROBE_WINDOW_MS)
    run.set_defaults(func=cmd_run)

    sim = sub.add_parser("sim", help="run one simulated schedule")
    sim.add_argument("--servers", type=int, default=5)
    src = sim.add_mutually_exclusive_group()
    src.add_argument("--schedule", help="schedule JSON file")
    src.add_argument("--seed", type=int, default=0, help="generate a random schedule from this seed")
    sim.add_argument("--trace-out", help="write the event trace here as JSON lines")
    sim.set_defaults(func=cmd_sim)

    soak = sub.add_parser("soak", help="run many random schedules through the checker")
    soak.add_argument("--servers", type=int, default=5)
    soak.add_argument("--seeds", type=int, default=1000)
    soak.add_argument("--start", type=int, default=0)
    soak.set_defaults(func=cmd_soak)

    serve = sub.add_parser("serve", help="run one server (flags as python -m raftws.server)",
                           add_help=False)
    serve.add_argument("rest", nargs=argparse.REMAINDER)
    serve.set_defaults(func=cmd_serve)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
