"""Deterministic network and timer simulator for :class:`~raftws.core.RaftNode`.

A :class:`Simulation` owns a virtual clock with 1 ms resolution and a heap
of pending events ordered by ``(time, sequence)``. Every action a node
emits is interpreted here: sends become deliveries after a sampled delay
(unless dropped or cut by a partition), timers fire at virtual deadlines,
and crash/restart events replace a node. A :class:`Checker` watches every
step for safety violations.

All randomness flows from ``Schedule.seed``, so one schedule always yields
one trace.
"""

from __future__ import annotations

import heapq
import itertools
import json
import random
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

from raftws.core import (
    ApplyCommitted,
    ArmTimer,
    BecomeCandidate,
    BecomeFollower,
    BecomeLeader,
    Broadcast,
    CancelTimer,
    Duplicate,
    ELECTION_TIMER,
    HEARTBEAT_TIMER,
    LogEntry,
    MemoryStorage,
    RaftNode,
    Redirect,
    ReplyToClient,
    Role,
    Send,
    ServerState,
)
from raftws.statemachine import KvStateMachine
from raftws.wire import (
    AppendEntriesReq,
    AppendEntriesResp,
    InsertCommandReq,
    InsertCommandResp,
    RequestVoteReq,
    RequestVoteResp,
)

CLIENT = "client"


@dataclass
class Schedule:
    seed: int = 0
    drop_rate: float = 0.0
    delay_range: tuple[int, int] = (1, 10)
    # (time_ms, groups); an empty group list heals the network
    partitions: list[tuple[int, list[list[str]]]] = field(default_factory=list)
    # (time_ms, server id | "leader" | "follower")
    crashes: list[tuple[int, str]] = field(default_factory=list)
    restarts: list[tuple[int, str]] = field(default_factory=list)
    # (time_ms, uid, command, parameters)
    proposals: list[tuple[int, str, str, list[str]]] = field(default_factory=list)
    duration_ms: int = 2000
    durable: bool = True
    heartbeat_ms: int = 50
    timeout_range: tuple[int, int] = (150, 300)
    client_timeout_ms: int = 300
    # message loss stops at this virtual time (None: never)
    quiet_after_ms: Optional[int] = None
    # delays drawn after the quiet point (None: keep delay_range)
    quiet_delay_range: Optional[tuple[int, int]] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_rate <= 1.0:
            raise ValueError("drop_rate must be a probability")
        for rng in (self.delay_range, self.quiet_delay_range or (0, 0)):
            if not 0 <= rng[0] <= rng[1]:
                raise ValueError("bad delay range")
        if self.duration_ms <= 0:
            raise ValueError("duration must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> "Schedule":
        obj = dict(obj)
        for key in ("delay_range", "timeout_range", "quiet_delay_range"):
            if obj.get(key) is not None:
                obj[key] = tuple(obj[key])
        for key in ("partitions", "crashes", "restarts", "proposals"):
            if key in obj:
                obj[key] = [tuple(item) for item in obj[key]]
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "Schedule":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class TraceEvent:
    time_ms: int
    seq: int
    kind: str
    payload: dict

    def to_json(self) -> str:
        return json.dumps({"timeMs": self.time_ms, "seq": self.seq, "kind": self.kind,
                           "payload": self.payload}, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class Violation:
    invariant: str
    detail: str
    position: int = -1
    time_ms: int = -1


# --------------------------------------------------------------------- checks


def check_invariants(states: dict[str, ServerState], committed: Optional[dict[str, list]] = None,
                     position: int = -1) -> list[Violation]:
    """Static safety checks over a snapshot of server states.

    ``committed`` maps server id to the entries that server has applied;
    when omitted, each state's ``log[:last_applied]`` is used.
    """
    out: list[Violation] = []
    ids = sorted(states)

    leaders: dict[int, str] = {}
    for sid in ids:
        st = states[sid]
        if st.role is Role.LEADER:
            other = leaders.setdefault(st.current_term, sid)
            if other != sid:
                out.append(Violation("ElectionSafety",
                                     f"{other} and {sid} both lead term {st.current_term}", position))
        if not st.last_applied <= st.commit_index <= st.last_log_index:
            out.append(Violation("Monotonicity",
                                 f"{sid}: lastApplied={st.last_applied} commitIndex={st.commit_index} "
                                 f"lastLogIndex={st.last_log_index}", position))

    for a, b in itertools.combinations(ids, 2):
        la, lb = states[a].log, states[b].log
        top = 0
        for i in range(min(len(la), len(lb)), 0, -1):
            if la[i - 1].term == lb[i - 1].term:
                top = i
                break
        for i in range(top):
            if la[i].key() != lb[i].key():
                out.append(Violation("LogMatching",
                                     f"{a},{b} agree at ({top}, term {la[top - 1].term}) "
                                     f"but differ at index {i + 1}", position))
                break

    if committed is None:
        committed = {sid: states[sid].log[:states[sid].last_applied] for sid in ids}
    applied: dict[int, tuple[str, tuple]] = {}
    for sid in sorted(committed):
        for e in committed[sid]:
            k = (e.uid, e.command, tuple(e.parameters))
            first = applied.setdefault(e.index, (sid, k))
            if first[1] != k:
                out.append(Violation("StateMachineSafety",
                                     f"index {e.index}: {first[0]} applied {first[1]}, {sid} applied {k}",
                                     position))
    return out


class Checker:
    """Incremental safety checker fed by the simulator after every step.

    Log matching is checked across all servers and all time: each appended
    entry gets an interned id for its whole log prefix, and two appends with
    equal (index, term) must carry the same prefix id.
    """

    def __init__(self) -> None:
        self.violations: list[Violation] = []
        self.leaders: dict[int, str] = {}
        self.votes: dict[tuple[str, int], str] = {}
        self.applied: dict[int, tuple] = {}
        self.applied_uid: dict[str, int] = {}
        self._prefix_ids: dict[tuple, int] = {}
        self._chains: dict[str, list[int]] = {}
        self._seen: dict[tuple[int, int], int] = {}
        self._mono: dict[str, tuple[int, int, int]] = {}
        self.pos = -1
        self.time_ms = -1

    def _flag(self, invariant: str, detail: str) -> None:
        self.violations.append(Violation(invariant, detail, self.pos, self.time_ms))

    def on_append(self, sid: str, role: Role, entry: LogEntry) -> None:
        chain = self._chains.setdefault(sid, [])
        if entry.index != len(chain) + 1:
            self._flag("LogMatching", f"{sid} appended index {entry.index} after {len(chain)}")
            return
        prev = chain[-1] if chain else -1
        pid = self._prefix_ids.setdefault((prev, entry.key()), len(self._prefix_ids))
        chain.append(pid)
        first = self._seen.setdefault((entry.index, entry.term), pid)
        if first != pid:
            self._flag("LogMatching",
                       f"{sid}: entry ({entry.index}, term {entry.term}) with a different prefix")

    def on_truncate(self, sid: str, role: Role, from_index: int) -> None:
        if role is Role.LEADER:
            self._flag("LeaderAppendOnly", f"leader {sid} truncated its log from {from_index}")
        del self._chains.setdefault(sid, [])[from_index - 1:]

    def on_reset_log(self, sid: str, entries) -> None:
        self._chains[sid] = []
        for e in entries:
            self.on_append(sid, Role.FOLLOWER, LogEntry.from_wire(e))

    def on_vote(self, sid: str, term: int, candidate: str) -> None:
        first = self.votes.setdefault((sid, term), candidate)
        if first != candidate:
            self._flag("VoteSafety", f"{sid} voted for {first} and {candidate} in term {term}")

    def on_leader(self, sid: str, term: int) -> None:
        first = self.leaders.setdefault(term, sid)
        if first != sid:
            self._flag("ElectionSafety", f"{first} and {sid} both elected in term {term}")

    def on_apply(self, sid: str, entry: LogEntry) -> None:
        k = (entry.uid, entry.command, tuple(entry.parameters))
        first = self.applied.setdefault(entry.index, k)
        if first != k:
            self._flag("StateMachineSafety", f"{sid} applied {k} at {entry.index}, earlier {first}")
        at = self.applied_uid.setdefault(entry.uid, entry.index)
        if at != entry.index:
            self._flag("Idempotency", f"uid {entry.uid} applied at {at} and {entry.index}")

    def on_restart(self, sid: str, durable: bool) -> None:
        term = self._mono.get(sid, (0, 0, 0))[0] if durable else 0
        self._mono[sid] = (term, 0, 0)

    def observe(self, sid: str, st: ServerState) -> None:
        term, commit, applied = self._mono.get(sid, (0, 0, 0))
        if st.current_term < term or st.commit_index < commit or st.last_applied < applied:
            self._flag("Monotonicity", f"{sid} went backwards")
        if not st.last_applied <= st.commit_index <= st.last_log_index:
            self._flag("Monotonicity", f"{sid}: lastApplied <= commitIndex <= lastLogIndex broken")
        self._mono[sid] = (st.current_term, st.commit_index, st.last_applied)


class _WatchedStorage(MemoryStorage):
    """Storage that reports log edits to the checker."""

    def __init__(self, sim: "Simulation", sid: str) -> None:
        super().__init__()
        self.sim = sim
        self.sid = sid

    def _role(self) -> Role:
        nd = self.sim.nodes.get(self.sid)
        return nd.state.role if nd is not None else Role.FOLLOWER

    def append(self, entry: LogEntry) -> None:
        super().append(entry)
        self.sim.checker.on_append(self.sid, self._role(), entry)

    def truncate(self, from_index: int) -> None:
        super().truncate(from_index)
        self.sim.checker.on_truncate(self.sid, self._role(), from_index)


# ----------------------------------------------------------------- simulation


@dataclass
class _Proposal:
    uid: str
    command: str
    parameters: list[str]
    attempt: int = 0
    target: Optional[str] = None
    done: bool = False
    submitted_ms: int = 0
    committed_ms: Optional[int] = None
    result: Optional[str] = None
    success: Optional[bool] = None


@dataclass
class SimResult:
    trace: list[TraceEvent]
    states: dict[str, Optional[ServerState]]
    violations: list[Violation]
    proposals: dict[str, _Proposal]
    nodes: dict[str, Optional[RaftNode]]

    def trace_jsonl(self) -> str:
        return "".join(ev.to_json() + "\n" for ev in self.trace)

    def leaders(self) -> list[str]:
        return [sid for sid, st in self.states.items() if st is not None and st.role is Role.LEADER]


class Simulation:
    def __init__(self, n: int, schedule: Schedule, *, record_trace: bool = True) -> None:
        if n < 1:
            raise ValueError("need at least one server")
        self.schedule = schedule
        self.ids = [f"s{i}" for i in range(1, n + 1)]
        self.now = 0
        self.rng = random.Random(schedule.seed)
        self.record_trace = record_trace
        self.trace: list[TraceEvent] = []
        self.checker = Checker()
        self._seq = itertools.count()
        self._heap: list[tuple[int, int, str, Any]] = []
        self._timer_gen: dict[tuple[str, str], int] = {}
        self.incarnation = {sid: 0 for sid in self.ids}
        self.storage: dict[str, MemoryStorage] = {}
        self.nodes: dict[str, Optional[RaftNode]] = {}
        self.groups: Optional[list[set[str]]] = None
        self.waiters: dict[str, dict[str, list[tuple[str, int]]]] = {sid: {} for sid in self.ids}
        self.proposals: dict[str, _Proposal] = {}

        for sid in self.ids:
            self._boot(sid)
        for t, groups in schedule.partitions:
            self._push(t, "partition", groups)
        for t, target in schedule.crashes:
            self._push(t, "crash", target)
        for t, target in schedule.restarts:
            self._push(t, "restart", target)
        for t, uid, command, params in schedule.proposals:
            self._push(t, "propose", (uid, command, list(params)))

    # ---------------------------------------------------------- plumbing

    def _push(self, t: int, kind: str, data: Any) -> None:
        heapq.heappush(self._heap, (t, next(self._seq), kind, data))

    def _log(self, kind: str, **payload) -> None:
        if self.record_trace:
            self.trace.append(TraceEvent(self.now, len(self.trace), kind, payload))

    def _boot(self, sid: str) -> None:
        inc = self.incarnation[sid]
        if sid not in self.storage or not self.schedule.durable:
            self.storage[sid] = _WatchedStorage(self, sid)
            self.checker.on_reset_log(sid, [])
        else:
            self.checker.on_reset_log(sid, self.storage[sid].entries)
        node = RaftNode(
            sid, self.ids,
            state_machine=KvStateMachine(),
            rng=random.Random(f"{self.schedule.seed}/{sid}/{inc}"),
            timeout_range=self.schedule.timeout_range,
            heartbeat_ms=self.schedule.heartbeat_ms,
            storage=self.storage[sid],
        )
        self.nodes[sid] = node
        self.checker.on_restart(sid, self.schedule.durable)
        self._run_actions(sid, node.start())

    def connected(self, a: str, b: str) -> bool:
        if self.groups is None or CLIENT in (a, b):
            return True
        return any(a in g and b in g for g in self.groups)

    def _send(self, src: str, dst: str, msg: Any, ctx: Any = None) -> None:
        self._log("send", src=src, dst=dst, type=msg.msg_type)
        quiet = self.schedule.quiet_after_ms
        lossy = quiet is None or self.now < quiet
        if lossy and self.schedule.drop_rate and self.rng.random() < self.schedule.drop_rate:
            self._log("drop", src=src, dst=dst, type=msg.msg_type, why="loss")
            return
        lo, hi = self.schedule.delay_range
        if not lossy and self.schedule.quiet_delay_range is not None:
            lo, hi = self.schedule.quiet_delay_range
        delay = self.rng.randint(lo, hi)
        dst_inc = self.incarnation.get(dst, 0)
        src_inc = self.incarnation.get(src, 0)
        self._push(self.now + delay, "deliver", (src, dst, msg, ctx, src_inc, dst_inc))

    # ---------------------------------------------------------- actions

    def _run_actions(self, sid: str, actions) -> None:
        node = self.nodes[sid]
        for a in actions:
            if isinstance(a, Send):
                ctx = None
                if isinstance(a.message, AppendEntriesReq):
                    ctx = (a.message.prev_log_index, len(a.message.entries))
                self._send(sid, a.to, a.message, ctx)
            elif isinstance(a, Broadcast):
                for to in a.to:
                    self._send(sid, to, a.message)
            elif isinstance(a, ArmTimer):
                key = (sid, a.timer)
                gen = self._timer_gen.get(key, 0) + 1
                self._timer_gen[key] = gen
                self._push(self.now + a.delay_ms, "timer",
                           (sid, a.timer, gen, self.incarnation[sid]))
            elif isinstance(a, CancelTimer):
                key = (sid, a.timer)
                self._timer_gen[key] = self._timer_gen.get(key, 0) + 1
            elif isinstance(a, ApplyCommitted):
                for e in a.entries:
                    self.checker.on_apply(sid, e)
                    self._log("apply", node=sid, index=e.index, uid=e.uid)
            elif isinstance(a, ReplyToClient):
                self._log("commit", node=sid, index=a.index, uid=a.uid)
                for client, attempt in self.waiters[sid].pop(a.uid, []):
                    self._send(sid, client, InsertCommandResp(a.success, a.result, None), (a.uid, attempt))
            elif isinstance(a, (BecomeFollower, BecomeCandidate, BecomeLeader)):
                role = {BecomeFollower: "Follower", BecomeCandidate: "Candidate",
                        BecomeLeader: "Leader"}[type(a)]
                self._log("roleChange", node=sid, role=role, term=a.term)
                if isinstance(a, BecomeLeader):
                    self.checker.on_leader(sid, a.term)
                if isinstance(a, BecomeFollower):
                    self._fail_waiters(sid, node.state.current_leader)

    def _fail_waiters(self, sid: str, leader: Optional[str]) -> None:
        for uid, clients in self.waiters[sid].items():
            for client, attempt in clients:
                self._send(sid, client, InsertCommandResp(False, None, leader), (uid, attempt))
        self.waiters[sid] = {}

    # ---------------------------------------------------------- events

    def _deliver(self, src, dst, msg, ctx, src_inc, dst_inc) -> None:
        if dst == CLIENT:
            self._client_response(src, msg, ctx)
            return
        node = self.nodes.get(dst)
        if node is None or self.incarnation[dst] != dst_inc and not isinstance(
                msg, (RequestVoteReq, AppendEntriesReq, InsertCommandReq)):
            self._log("drop", src=src, dst=dst, type=msg.msg_type, why="down")
            return
        if not self.connected(src, dst):
            self._log("drop", src=src, dst=dst, type=msg.msg_type, why="partition")
            return
        self._log("deliver", src=src, dst=dst, type=msg.msg_type)
        if isinstance(msg, RequestVoteReq):
            resp, actions = node.handle_request_vote(msg)
            if resp.vote_granted:
                self.checker.on_vote(dst, resp.term, msg.candidate_id)
            self._run_actions(dst, actions)
            self._send(dst, src, resp)
        elif isinstance(msg, AppendEntriesReq):
            resp, actions = node.handle_append_entries(msg)
            self._run_actions(dst, actions)
            self._send(dst, src, resp, ctx)
        elif isinstance(msg, RequestVoteResp):
            self._run_actions(dst, node.on_vote_response(src, msg))
        elif isinstance(msg, AppendEntriesResp):
            self._run_actions(dst, node.on_append_response(src, msg, *ctx))
        elif isinstance(msg, InsertCommandReq):
            outcome, actions = node.propose(msg.uid, msg.command, msg.parameters)
            if isinstance(outcome, Redirect):
                self._send(dst, src, InsertCommandResp(False, None, outcome.leader), ctx)
            elif isinstance(outcome, Duplicate):
                self._send(dst, src, InsertCommandResp(outcome.success, outcome.result, None), ctx)
            else:
                self.waiters[dst].setdefault(msg.uid, []).append((src, ctx[1]))
            self._run_actions(dst, actions)
        self.checker.observe(dst, node.state)

    def _fire_timer(self, sid, timer, gen, inc) -> None:
        node = self.nodes.get(sid)
        if node is None or inc != self.incarnation[sid] or self._timer_gen.get((sid, timer)) != gen:
            return
        self._log("timerFire", node=sid, timer=timer)
        if timer == ELECTION_TIMER and node.role is not Role.LEADER:
            self._run_actions(sid, node.on_election_timeout())
        elif timer == HEARTBEAT_TIMER and node.role is Role.LEADER:
            self._run_actions(sid, node.on_heartbeat_tick())
        self.checker.observe(sid, node.state)

    def current_leader(self) -> Optional[str]:
        best = None
        for sid in self.ids:
            nd = self.nodes.get(sid)
            if nd is not None and nd.role is Role.LEADER:
                if best is None or nd.state.current_term > self.nodes[best].state.current_term:
                    best = sid
        return best

    def _resolve(self, target: str, alive: bool) -> Optional[str]:
        if target == "leader":
            return self.current_leader()
        if target == "follower":
            lead = self.current_leader()
            pool = [s for s in self.ids if s != lead and (self.nodes.get(s) is not None) == alive]
            return pool[0] if pool else None
        return target

    def _crash(self, target: str) -> None:
        sid = self._resolve(target, alive=True)
        if sid is None or self.nodes.get(sid) is None:
            self._log("crash", node=sid, target=target, skipped=True)
            return
        self._log("crash", node=sid, target=target)
        self.nodes[sid] = None
        self.waiters[sid] = {}
        self.incarnation[sid] += 1

    def _restart(self, target: str) -> None:
        sid = target
        if sid not in self.ids or self.nodes.get(sid) is not None:
            self._log("restart", node=sid, skipped=True)
            return
        self._log("restart", node=sid)
        self._boot(sid)

    # ---------------------------------------------------------- client

    def _client_submit(self, p: _Proposal) -> None:
        p.attempt += 1
        if p.target is None:
            p.target = self.ids[self.rng.randrange(len(self.ids))]
        self._send(CLIENT, p.target, InsertCommandReq(p.uid, p.command, p.parameters),
                   (p.uid, p.attempt))
        self._push(self.now + self.schedule.client_timeout_ms, "client_timeout", (p.uid, p.attempt))

    def _client_response(self, src: str, msg: InsertCommandResp, ctx) -> None:
        uid, attempt = ctx
        p = self.proposals.get(uid)
        if p is None or p.done or attempt != p.attempt:
            return
        self._log("deliver", src=src, dst=CLIENT, type=msg.msg_type)
        if msg.result is not None:
            p.done, p.success, p.result, p.committed_ms = True, msg.success, msg.result, self.now
            self._log("clientDone", uid=uid, success=msg.success)
        elif msg.leader_address is not None and msg.leader_address != src:
            p.target = msg.leader_address
            self._client_submit(p)
        else:
            p.target = self._other_server(src)
            self._push(self.now + self.rng.randint(1, 100), "client_retry", (uid, p.attempt))

    def _other_server(self, avoid: Optional[str]) -> str:
        pool = [s for s in self.ids if s != avoid] or self.ids
        return pool[self.rng.randrange(len(pool))]

    # ---------------------------------------------------------- main loop

    def step(self) -> bool:
        if not self._heap:
            return False
        t, _, kind, data = heapq.heappop(self._heap)
        if t > self.schedule.duration_ms:
            self._heap.clear()
            return False
        self.now = t
        self.checker.pos = len(self.trace)
        self.checker.time_ms = t
        if kind == "deliver":
            self._deliver(*data)
        elif kind == "timer":
            self._fire_timer(*data)
        elif kind == "crash":
            self._crash(data)
        elif kind == "restart":
            self._restart(data)
        elif kind == "partition":
            self.groups = [set(g) for g in data] if data else None
            self._log("partition", groups=[sorted(g) for g in data] if data else [])
        elif kind == "propose":
            uid, command, params = data
            p = self.proposals.setdefault(uid, _Proposal(uid, command, params, submitted_ms=t))
            self._client_submit(p)
        elif kind == "client_timeout":
            uid, attempt = data
            p = self.proposals[uid]
            if not p.done and p.attempt == attempt:
                p.target = self._other_server(p.target)
                self._client_submit(p)
        elif kind == "client_retry":
            uid, attempt = data
            p = self.proposals[uid]
            if not p.done and p.attempt == attempt:
                self._client_submit(p)
        return True

    def run(self) -> SimResult:
        while self.step():
            pass
        self.now = self.schedule.duration_ms
        states = {sid: (nd.state if nd is not None else None) for sid, nd in self.nodes.items()}
        live = {sid: st for sid, st in states.items() if st is not None}
        violations = list(self.checker.violations)
        violations += check_invariants(live, position=len(self.trace))
        return SimResult(self.trace, states, violations, self.proposals, dict(self.nodes))


def run_schedule(n: int, schedule: Schedule, *, record_trace: bool = True) -> SimResult:
    """Simulate ``n`` servers under ``schedule`` and return trace, states and violations."""
    return Simulation(n, schedule, record_trace=record_trace).run()


def random_schedule(seed: int, n: int = 5, *, max_drop: float = 0.2, max_delay: int = 150,
                    max_crashes: int = 2, duration_ms: int = 3000, proposals: int = 12) -> Schedule:
    """A randomized fault schedule used by the soak tests."""
    rng = random.Random(f"schedule/{seed}")
    ids = [f"s{i}" for i in range(1, n + 1)]
    lo = rng.randint(1, max_delay // 3)
    hi = rng.randint(lo, max_delay)
    crashes, restarts = [], []
    for _ in range(rng.randint(0, max_crashes)):
        t = rng.randint(100, duration_ms - 500)
        target = rng.choice(ids + ["leader", "follower"])
        crashes.append((t, target))
        if target in ids and rng.random() < 0.5:
            restarts.append((t + rng.randint(50, 800), target))
    partitions = []
    if rng.random() < 0.3:
        t = rng.randint(100, duration_ms - 800)
        cut = rng.randint(1, n - 1)
        shuffled = ids[:]
        rng.shuffle(shuffled)
        partitions = [(t, [shuffled[:cut], shuffled[cut:]]), (t + rng.randint(100, 700), [])]
    props = [(rng.randint(0, duration_ms - 200), f"u{seed}-{k}", "PUT", [f"k{k % 5}", str(k)])
             for k in range(proposals)]
    return Schedule(
        seed=seed,
        drop_rate=round(rng.uniform(0.0, max_drop), 3),
        delay_range=(lo, hi),
        partitions=partitions,
        crashes=sorted(crashes),
        restarts=sorted(restarts),
        proposals=sorted(props),
        duration_ms=duration_ms,
    )
