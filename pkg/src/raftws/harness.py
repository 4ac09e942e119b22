"""Benchmark manager: real server processes, in-process clients, scripted kills.

One run goes: spawn the servers, wait until every one has been discovered
over multicast, hand out roles, peer lists and election timeouts, let the
cluster settle for twice the longest timeout, release all clients at once,
kill servers on the scenario's timeline, wait for every EndOfWorkload,
then audit the survivors and tear everything down.
"""

from __future__ import annotations

import json
import logging
import os
import random
import signal
import statistics
import subprocess
import sys
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from raftws.client import ClientSession, RetriesExhausted, WorkloadResult, run_workload
from raftws.core import ELECTION_TIMEOUT_RANGE
from raftws.discovery import MCAST_GROUP, MCAST_PORT, PROBE_WINDOW_MS, DiscoveryAgent
from raftws.statemachine import NOOP
from raftws.transport import RpcServer, Transport, TransportError
from raftws.wire import (
    Ack,
    ConfigureReq,
    DumpReq,
    DumpResp,
    EndOfWorkload,
    ShutdownReq,
    StartReq,
    StatusReq,
    StatusResp,
    WriteStatsReq,
)

log = logging.getLogger(__name__)

SCENARIOS = ("0E", "1F", "1L", "2F", "1F1L")
# (offset after workload start in ms, victim role)
KILL_PLAN = {
    "0E": [],
    "1F": [(500, "follower")],
    "1L": [(500, "leader")],
    "2F": [(500, "follower"), (1000, "follower")],
    "1F1L": [(500, "follower"), (1000, "leader")],
}
DISCARD = 10


class StartupTimeout(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    servers: int = 3
    clients: int = 1
    iterations: int = 120
    scenario: str = "0E"
    election_timeout_range: tuple[int, int] = ELECTION_TIMEOUT_RANGE
    runs: int = 5
    heartbeat_mode: str = "safe"
    seed: Optional[int] = None
    mcast_group: str = MCAST_GROUP
    mcast_port: int = MCAST_PORT
    probe_window_ms: int = PROBE_WINDOW_MS
    hosts: Optional[list[str]] = None
    out_dir: Optional[str] = None
    startup_timeout_s: float = 20.0
    workload_timeout_s: float = 300.0

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.servers < 1 or self.clients < 1 or self.runs < 1:
            raise ValueError("servers, clients and runs must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.scenario in ("1F", "1L") and self.servers < 3:
            raise ValueError(f"scenario {self.scenario} needs at least 3 servers")
        if self.scenario in ("2F", "1F1L") and self.servers != 5:
            raise ValueError(f"scenario {self.scenario} needs exactly 5 servers")
        lo, hi = self.election_timeout_range
        if not 0 < lo <= hi:
            raise ValueError("bad election timeout range")
        if self.heartbeat_mode not in ("safe", "paper"):
            raise ValueError("heartbeat_mode is 'safe' or 'paper'")
        if self.hosts is not None and len(self.hosts) != self.servers:
            raise ValueError("hosts file must list exactly one address per server")


@dataclass(frozen=True)
class StatsRecord:
    clients: int
    latency_ms: float
    throughput_ops: float


def compute_stats(samples_per_client, wall_s: float, iterations: Optional[int] = None) -> StatsRecord:
    """Latency over each client's middle samples, throughput over everything.

    The first and last ten samples of every client are dropped before the
    latency mean; throughput is ``clients * iterations / wall_s``.
    """
    samples_per_client = [list(s) for s in samples_per_client]
    if not samples_per_client:
        raise ValueError("no clients")
    if iterations is None:
        iterations = len(samples_per_client[0])
    if iterations < 2 * DISCARD + 1:
        raise ValueError(f"latency needs at least {2 * DISCARD + 1} iterations, got {iterations}")
    if wall_s <= 0:
        raise ValueError("wall time must be positive")
    kept = [x for s in samples_per_client for x in s[DISCARD:len(s) - DISCARD]]
    if not kept:
        raise ValueError("no samples left after discarding head and tail")
    clients = len(samples_per_client)
    return StatsRecord(clients, statistics.fmean(kept), clients * iterations / wall_s)


def average_records(records) -> StatsRecord:
    records = list(records)
    return StatsRecord(records[0].clients,
                       statistics.fmean(r.latency_ms for r in records),
                       statistics.fmean(r.throughput_ops for r in records))


def emit_csv(records, path) -> None:
    """Write headerless ``clients latency throughput`` rows, ascending by clients."""
    lines = [f"{r.clients} {round(r.latency_ms, 3)} {round(r.throughput_ops, 3)}\n"
             for r in sorted(records, key=lambda r: r.clients)]
    with open(path, "w", encoding="ascii") as fh:
        fh.writelines(lines)


# ------------------------------------------------------------------ cluster


@dataclass
class ServerHandle:
    endpoint_id: str
    address: str
    proc: Optional[subprocess.Popen] = None
    alive: bool = True


class Cluster:
    """Server processes for one run; local children or pre-started remote servers."""

    def __init__(self, cfg: ExperimentConfig, run_dir: Path, tag: str, rng: random.Random) -> None:
        self.cfg = cfg
        self.handles: list[ServerHandle] = []
        self.transport = Transport("manager", default_timeout_ms=1000)
        self._logs = []
        if cfg.hosts:
            for i, addr in enumerate(cfg.hosts):
                self.handles.append(ServerHandle(f"remote-{i}", addr))
            return
        for i in range(cfg.servers):
            eid = f"urn:raftws:{tag}:s{i}"
            err = open(run_dir / f"server-{i}.log", "w")
            self._logs.append(err)
            proc = subprocess.Popen(
                [sys.executable, "-m", "raftws.server", "--port", "0", "--endpoint-id", eid,
                 "--mcast-group", cfg.mcast_group, "--mcast-port", str(cfg.mcast_port),
                 "--heartbeat-mode", cfg.heartbeat_mode, "--seed", str(rng.getrandbits(32)),
                 "--log-level", "WARNING"],
                stdout=subprocess.PIPE, stderr=err, text=True,
            )
            self.handles.append(ServerHandle(eid, "", proc))
        for h in self.handles:
            line = h.proc.stdout.readline().split()
            if len(line) < 3 or line[0] != "READY":
                raise StartupTimeout(f"server {h.endpoint_id} failed to start")
            h.address = line[2]

    @property
    def addresses(self) -> list[str]:
        return [h.address for h in self.handles]

    def live(self) -> list[ServerHandle]:
        return [h for h in self.handles if h.alive]

    def call(self, h: ServerHandle, body, timeout_ms: float = 1000):
        return self.transport.call(h.address, body, timeout_ms).body

    def status(self, h: ServerHandle, timeout_ms: float = 300) -> Optional[StatusResp]:
        try:
            resp = self.call(h, StatusReq(), timeout_ms)
        except TransportError:
            return None
        return resp if isinstance(resp, StatusResp) else None

    def kill(self, h: ServerHandle) -> None:
        if h.proc is not None:
            h.proc.send_signal(signal.SIGKILL)
        else:
            try:
                self.call(h, ShutdownReq(abrupt=True), 500)
            except TransportError:
                pass
        h.alive = False

    def teardown(self) -> None:
        for h in self.handles:
            if h.proc is not None and h.proc.poll() is None:
                h.proc.send_signal(signal.SIGKILL)
            elif h.proc is None and h.alive:
                try:
                    self.call(h, ShutdownReq(), 500)
                except TransportError:
                    pass
        for h in self.handles:
            if h.proc is not None:
                h.proc.wait(5)
                h.proc.stdout.close()
        for fh in self._logs:
            fh.close()
        self.transport.close()


def _await_discovery(cluster: Cluster, cfg: ExperimentConfig, agent: DiscoveryAgent) -> None:
    expected = {h.endpoint_id for h in cluster.handles}
    deadline = time.monotonic() + cfg.startup_timeout_s
    while not expected <= set(agent.table.peers):
        if time.monotonic() > deadline:
            missing = sorted(expected - set(agent.table.peers))
            raise StartupTimeout(f"never discovered: {missing}")
        agent.probe(window_ms=cfg.probe_window_ms)


# ------------------------------------------------------------------ one run


@dataclass
class KillRecord:
    role: str
    target: str
    planned_ms: int
    actual_ms: float
    anomaly: Optional[str] = None


@dataclass
class Audit:
    issued: int = 0
    committed: int = 0
    duplicates: int = 0
    missing: int = 0
    unexpected: int = 0
    states_identical: bool = True
    survivors: int = 0

    @property
    def clean(self) -> bool:
        return (self.duplicates == 0 and self.missing == 0 and self.unexpected == 0
                and self.states_identical)


@dataclass
class RunResult:
    config: dict
    index: int
    leader: str
    timeouts_ms: dict
    stats: Optional[StatsRecord]
    wall_s: float
    kills: list[KillRecord]
    audit: Audit
    unavailability_ms: Optional[float]
    partial: bool
    workloads: list = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("workloads")
        d["audit"]["clean"] = self.audit.clean
        return d


def inject_failures(cfg: ExperimentConfig, cluster: Cluster, start: float, rng: random.Random,
                    kills: list[KillRecord], stop: threading.Event) -> None:
    """Kill servers on the scenario timeline, relative to ``start`` (monotonic seconds)."""
    plan = KILL_PLAN[cfg.scenario]
    for i, (offset, role) in enumerate(plan):
        if stop.wait(max(0.0, start + offset / 1000.0 - time.monotonic())):
            # recorded so a run that outpaced its plan doesn't pass as the full scenario
            now = (time.monotonic() - start) * 1000
            kills.extend(KillRecord(r, "", o, now, "workload finished first") for o, r in plan[i:])
            return
        live = cluster.live()
        statuses = {h.address: cluster.status(h, 100) for h in live}
        leaders = [h for h in live if (st := statuses[h.address]) and st.role == "Leader"]
        if role == "leader":
            victims = leaders[:1]
        else:
            victims = [h for h in live if h not in leaders]
            victims = [rng.choice(victims)] if victims else []
        if not victims:
            kills.append(KillRecord(role, "", offset, (time.monotonic() - start) * 1000, "no such target"))
            continue
        victim = victims[0]
        anomaly = None
        if victim.proc is not None and victim.proc.poll() is not None:
            anomaly = "target already dead"
        cluster.kill(victim)
        kills.append(KillRecord(role, victim.address, offset, (time.monotonic() - start) * 1000, anomaly))


def unavailability_window(workloads: list[WorkloadResult], kill_time: float) -> Optional[float]:
    """Gap in ms between the last commit seen before ``kill_time`` and the first after it."""
    done = sorted(t for w in workloads for t in w.completions)
    before = [t for t in done if t <= kill_time]
    after = [t for t in done if t > kill_time]
    if not before or not after:
        return None
    return (after[0] - before[-1]) * 1000.0


def _settle(cluster: Cluster, timeout_s: float = 5.0) -> dict:
    """Wait until every survivor has applied the same commit index."""
    deadline = time.monotonic() + timeout_s
    while True:
        st = {h.address: cluster.status(h) for h in cluster.live()}
        commits = {(s.commit_index, s.last_applied) for s in st.values() if s is not None}
        if None not in st.values() and len(commits) == 1 and next(iter(commits))[0] == next(iter(commits))[1]:
            return st
        if time.monotonic() > deadline:
            return st
        time.sleep(0.05)


def audit_cluster(cluster: Cluster, issued_uids) -> Audit:
    """Exactly-once and replica-agreement checks over the survivors' dumps."""
    dumps: dict[str, DumpResp] = {}
    for h in cluster.live():
        try:
            resp = cluster.call(h, DumpReq(), 5000)
        except TransportError:
            continue
        if isinstance(resp, DumpResp):
            dumps[h.address] = resp
    issued = set(issued_uids)
    audit = Audit(issued=len(issued), survivors=len(dumps))
    if not dumps:
        audit.states_identical = False
        audit.missing = len(issued)
        return audit
    best = max(dumps.values(), key=lambda d: d.commit_index)
    uids = [e.uid for e in best.entries[:best.commit_index] if e.command != NOOP]
    audit.committed = len(uids)
    audit.duplicates = len(uids) - len(set(uids))
    audit.missing = len(issued - set(uids))
    audit.unexpected = len(set(uids) - issued)
    states = [json.dumps(d.state, sort_keys=True) for d in dumps.values()]
    audit.states_identical = len(set(states)) == 1
    return audit


def run_once(cfg: ExperimentConfig, index: int = 0) -> RunResult:
    rng = random.Random(f"{cfg.seed}/{index}") if cfg.seed is not None else random.Random()
    tag = f"{os.getpid()}-{index}-{rng.getrandbits(24):06x}"
    run_dir = Path(cfg.out_dir or ".") / f"run-{index}"
    run_dir.mkdir(parents=True, exist_ok=True)

    notices: dict[str, tuple[float, EndOfWorkload]] = {}
    notices_lock = threading.Lock()
    all_done = threading.Event()

    def on_notice(msg):
        if isinstance(msg.body, EndOfWorkload):
            with notices_lock:
                notices.setdefault(msg.body.client_id, (time.monotonic(), msg.body))
                if len(notices) >= cfg.clients:
                    all_done.set()
            return Ack(True)
        return Ack(False, "manager only accepts EndOfWorkload")

    manager = RpcServer(on_notice, identity="manager").start()
    agent = None if cfg.hosts else DiscoveryAgent("manager", group=cfg.mcast_group, port=cfg.mcast_port)
    cluster: Optional[Cluster] = None
    stop = threading.Event()
    try:
        cluster = Cluster(cfg, run_dir, tag, rng)
        if agent is not None:
            _await_discovery(cluster, cfg, agent)
        addrs = cluster.addresses
        leader = addrs[0]
        lo, hi = cfg.election_timeout_range
        timeouts = {a: rng.randint(lo, hi) for a in addrs}
        for h in cluster.handles:
            role = "Leader" if h.address == leader else "Follower"
            ack = cluster.call(h, ConfigureReq(role, 1, leader, addrs, timeouts[h.address], cfg.heartbeat_mode))
            if not (isinstance(ack, Ack) and ack.ok):
                raise StartupTimeout(f"{h.address} refused configuration: {ack}")
        for h in cluster.handles:
            cluster.call(h, StartReq())
        time.sleep(2 * max(timeouts.values()) / 1000.0)

        sessions = [ClientSession(client_id=f"client-{j}", seed=rng.getrandbits(32)).adopt(addrs, leader)
                    for j in range(cfg.clients)]
        results: list[Optional[WorkloadResult]] = [None] * cfg.clients
        gate = threading.Barrier(cfg.clients + 1)

        def client_main(j: int) -> None:
            gate.wait()
            try:
                results[j] = run_workload(sessions[j], cfg.iterations, notify=manager.address)
            except RetriesExhausted as exc:
                results[j] = exc.partial

        threads = [threading.Thread(target=client_main, args=(j,), daemon=True) for j in range(cfg.clients)]
        for t in threads:
            t.start()
        kills: list[KillRecord] = []
        start = time.monotonic()
        gate.wait()
        injector = threading.Thread(target=inject_failures, args=(cfg, cluster, start, rng, kills, stop),
                                    daemon=True)
        injector.start()
        all_done.wait(cfg.workload_timeout_s)
        for t in threads:
            t.join(5)
        stop.set()
        injector.join(5)

        workloads = [w for w in results if w is not None]
        partial = len(notices) < cfg.clients or any(w.partial for w in workloads) or len(workloads) < cfg.clients
        last = max((t for t, _ in notices.values()), default=time.monotonic())
        wall = last - start
        stats = None
        if not partial and cfg.iterations >= 2 * DISCARD + 1:
            stats = compute_stats([w.samples_ms for w in workloads], wall, cfg.iterations)

        unavail = None
        leader_kills = [k for k in kills if k.role == "leader" and k.target]
        if leader_kills:
            unavail = unavailability_window(workloads, start + leader_kills[0].actual_ms / 1000.0)

        _settle(cluster)
        audit = audit_cluster(cluster, [u for s in sessions for u in s.uids])
        for i, h in enumerate(cluster.handles):
            if h.alive:
                try:
                    cluster.call(h, WriteStatsReq(str((run_dir / f"stats-server-{i}.json").resolve())))
                except TransportError as exc:
                    log.warning("stats from %s lost: %s", h.address, exc)
        for s in sessions:
            s.close()
        result = RunResult(
            config={k: v for k, v in asdict(cfg).items() if k != "hosts"},
            index=index, leader=leader, timeouts_ms=timeouts, stats=stats, wall_s=wall,
            kills=kills, audit=audit, unavailability_ms=unavail, partial=partial, workloads=workloads,
        )
        (run_dir / "run.json").write_text(json.dumps(result.to_json(), indent=1, sort_keys=True))
        return result
    finally:
        stop.set()
        if cluster is not None:
            cluster.teardown()
        if agent is not None:
            agent.close()
        manager.stop()


def run_trials(cfg: ExperimentConfig) -> list[RunResult]:
    return [run_once(cfg, i) for i in range(cfg.runs)]


def run_experiment(cfg: ExperimentConfig) -> list[StatsRecord]:
    """Per-run records followed by their average (the CSV row)."""
    runs = run_trials(cfg)
    records = [r.stats for r in runs if r.stats is not None]
    return records + [average_records(records)] if records else []
