"""Event-driven Raft server logic.

:class:`RaftNode` never touches a socket or a clock. Each handler takes one
input event (a message, a timer expiry, a client proposal) and returns the
list of :class:`Action` objects the surrounding runtime must carry out, in
order. The same node therefore runs unchanged under the TCP runtime in
:mod:`raftws.server` and under the simulator in :mod:`raftws.simnet`.

Handlers must be called serially.
"""

from __future__ import annotations

import enum
import json
import random
from dataclasses import dataclass, field
from typing import Optional, Union

from raftws.statemachine import NOOP, KvStateMachine, StateMachine
from raftws.wire import (
    AppendEntriesReq,
    AppendEntriesResp,
    Entry,
    RequestVoteReq,
    RequestVoteResp,
)

ELECTION_TIMEOUT_RANGE = (150, 300)
HEARTBEAT_MS = 50
MAX_BATCH = 256

ELECTION_TIMER = "election"
HEARTBEAT_TIMER = "heartbeat"


class Role(str, enum.Enum):
    FOLLOWER = "Follower"
    CANDIDATE = "Candidate"
    LEADER = "Leader"


class RoleError(RuntimeError):
    """Handler invoked in a role that does not accept it."""


def majority_threshold(n: int) -> int:
    """Votes (self included) needed to win an election in a cluster of ``n``."""
    if n < 1:
        raise ValueError("cluster size must be >= 1")
    return n // 2 + 1


def needed_follower_responses(n: int) -> int:
    """Follower acks a leader waits for before an entry commits; it counts itself."""
    return majority_threshold(n) - 1


@dataclass
class LogEntry:
    index: int
    term: int
    uid: str
    command: str
    parameters: list[str] = field(default_factory=list)
    result: Optional[str] = None
    success: Optional[bool] = None
    responses_needed: int = 0

    def to_wire(self) -> Entry:
        return Entry(self.index, self.term, self.uid, self.command, list(self.parameters))

    @classmethod
    def from_wire(cls, e: Entry) -> "LogEntry":
        return cls(e.index, e.term, e.uid, e.command, list(e.parameters))

    def key(self) -> tuple:
        return (self.index, self.term, self.uid, self.command, tuple(self.parameters))


@dataclass
class ServerState:
    role: Role = Role.FOLLOWER
    current_term: int = 0
    voted_for: Optional[str] = None
    current_leader: Optional[str] = None
    log: list[LogEntry] = field(default_factory=list)
    commit_index: int = 0
    last_applied: int = 0
    next_index: dict[str, int] = field(default_factory=dict)
    match_index: dict[str, int] = field(default_factory=dict)
    election_timeout_ms: int = 150

    @property
    def last_log_index(self) -> int:
        return len(self.log)

    @property
    def last_log_term(self) -> int:
        return self.log[-1].term if self.log else 0

    def term_at(self, index: int) -> int:
        return self.log[index - 1].term if index >= 1 else 0

    def entry(self, index: int) -> LogEntry:
        return self.log[index - 1]


# -------------------------------------------------------------------- actions


class ActionKind(str, enum.Enum):
    SEND = "Send"
    BROADCAST = "Broadcast"
    ARM_TIMER = "ArmTimer"
    CANCEL_TIMER = "CancelTimer"
    APPLY_COMMITTED = "ApplyCommitted"
    REPLY_TO_CLIENT = "ReplyToClient"
    BECOME_FOLLOWER = "BecomeFollower"
    BECOME_CANDIDATE = "BecomeCandidate"
    BECOME_LEADER = "BecomeLeader"


@dataclass(frozen=True)
class Send:
    to: str
    message: object
    kind = ActionKind.SEND


@dataclass(frozen=True)
class Broadcast:
    to: tuple[str, ...]
    message: object
    kind = ActionKind.BROADCAST


@dataclass(frozen=True)
class ArmTimer:
    timer: str
    delay_ms: int
    kind = ActionKind.ARM_TIMER


@dataclass(frozen=True)
class CancelTimer:
    timer: str
    kind = ActionKind.CANCEL_TIMER


@dataclass(frozen=True)
class ApplyCommitted:
    """Entries just applied to the state machine, in index order."""

    entries: tuple[LogEntry, ...]
    kind = ActionKind.APPLY_COMMITTED


@dataclass(frozen=True)
class ReplyToClient:
    uid: str
    index: int
    success: bool
    result: Optional[str]
    kind = ActionKind.REPLY_TO_CLIENT


@dataclass(frozen=True)
class BecomeFollower:
    term: int
    kind = ActionKind.BECOME_FOLLOWER


@dataclass(frozen=True)
class BecomeCandidate:
    term: int
    kind = ActionKind.BECOME_CANDIDATE


@dataclass(frozen=True)
class BecomeLeader:
    term: int
    kind = ActionKind.BECOME_LEADER


Action = Union[Send, Broadcast, ArmTimer, CancelTimer, ApplyCommitted,
               ReplyToClient, BecomeFollower, BecomeCandidate, BecomeLeader]


# ------------------------------------------------------------ propose outcome


@dataclass(frozen=True)
class Redirect:
    leader: Optional[str]


@dataclass(frozen=True)
class Duplicate:
    success: bool
    result: Optional[str]


@dataclass(frozen=True)
class Pending:
    index: int


Outcome = Union[Redirect, Duplicate, Pending]


# -------------------------------------------------------------------- storage


class MemoryStorage:
    """Holds the state Raft must keep across restarts (term, vote, log).

    Keeping one instance across a simulated crash models a durable disk;
    handing a restarted node a fresh instance models total amnesia.
    """

    def __init__(self) -> None:
        self.term = 0
        self.voted_for: Optional[str] = None
        self.entries: list[Entry] = []

    def save_vote(self, term: int, voted_for: Optional[str]) -> None:
        self.term, self.voted_for = term, voted_for

    def append(self, entry: LogEntry) -> None:
        self.entries.append(entry.to_wire())

    def truncate(self, from_index: int) -> None:
        del self.entries[from_index - 1:]

    def load(self) -> tuple[int, Optional[str], list[Entry]]:
        return self.term, self.voted_for, list(self.entries)


class JournalStorage(MemoryStorage):
    """Append-only JSON-lines journal of term/vote changes and log edits."""

    def __init__(self, path) -> None:
        super().__init__()
        self.path = path
        try:
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    self._replay(json.loads(line))
        except FileNotFoundError:
            pass
        self._fh = open(path, "a", encoding="utf-8")

    def _replay(self, rec: dict) -> None:
        op = rec["op"]
        if op == "vote":
            super().save_vote(rec["term"], rec["votedFor"])
        elif op == "append":
            self.entries.append(Entry(**rec["entry"]))
        elif op == "truncate":
            super().truncate(rec["from"])

    def _write(self, rec: dict) -> None:
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self._fh.flush()

    def save_vote(self, term, voted_for) -> None:
        super().save_vote(term, voted_for)
        self._write({"op": "vote", "term": term, "votedFor": voted_for})

    def append(self, entry: LogEntry) -> None:
        super().append(entry)
        e = entry.to_wire()
        self._write({"op": "append", "entry": {
            "index": e.index, "term": e.term, "uid": e.uid,
            "command": e.command, "parameters": e.parameters}})

    def truncate(self, from_index: int) -> None:
        super().truncate(from_index)
        self._write({"op": "truncate", "from": from_index})

    def close(self) -> None:
        self._fh.close()


# ----------------------------------------------------------------------- node


class RaftNode:
    """One Raft server as a pure transition function over :class:`ServerState`.

    ``peers`` are the other members' ids (which double as their service
    addresses). ``heartbeat_mode="paper"`` makes the leader reuse its
    election timeout as the heartbeat period instead of ``heartbeat_ms``.
    """

    def __init__(
        self,
        node_id: str,
        peers,
        *,
        state_machine: Optional[StateMachine] = None,
        seed: Optional[int] = None,
        rng: Optional[random.Random] = None,
        timeout_range: tuple[int, int] = ELECTION_TIMEOUT_RANGE,
        heartbeat_ms: int = HEARTBEAT_MS,
        heartbeat_mode: str = "safe",
        storage: Optional[MemoryStorage] = None,
        max_batch: int = MAX_BATCH,
    ) -> None:
        if heartbeat_mode not in ("safe", "paper"):
            raise ValueError(f"unknown heartbeat mode {heartbeat_mode!r}")
        self.id = node_id
        self.peers: list[str] = sorted(p for p in peers if p != node_id)
        self.sm = state_machine if state_machine is not None else KvStateMachine()
        self.rng = rng if rng is not None else random.Random(seed)
        self.timeout_range = timeout_range
        self.heartbeat_ms = heartbeat_ms
        self.heartbeat_mode = heartbeat_mode
        self.max_batch = max_batch
        self.storage = storage if storage is not None else MemoryStorage()

        term, voted_for, entries = self.storage.load()
        self.state = ServerState(
            current_term=term,
            voted_for=voted_for,
            log=[LogEntry.from_wire(e) for e in entries],
            election_timeout_ms=self.draw_timeout(),
        )
        self._uids: dict[str, int] = {e.uid: e.index for e in self.state.log}
        self._votes: set[str] = set()
        self._inflight: dict[str, bool] = {}
        # peers whose last request failed at the transport; probed with empty appends
        self._unreachable: set[str] = set()

    # ------------------------------------------------------------- helpers

    @property
    def cluster_size(self) -> int:
        return len(self.peers) + 1

    @property
    def role(self) -> Role:
        return self.state.role

    def draw_timeout(self) -> int:
        lo, hi = self.timeout_range
        return self.rng.randint(lo, hi)

    def heartbeat_period(self) -> int:
        if self.heartbeat_mode == "paper":
            return self.state.election_timeout_ms
        return self.heartbeat_ms

    def set_peers(self, peers) -> None:
        """Replace the membership (dynamic-discovery mode; see docs)."""
        self.peers = sorted(p for p in peers if p != self.id)
        s = self.state
        if s.role is Role.LEADER:
            for p in self.peers:
                s.next_index.setdefault(p, s.last_log_index + 1)
                s.match_index.setdefault(p, 0)

    def _persist_vote(self) -> None:
        self.storage.save_vote(self.state.current_term, self.state.voted_for)

    def _append(self, entry: LogEntry) -> None:
        self.state.log.append(entry)
        self._uids[entry.uid] = entry.index
        self.storage.append(entry)

    def _truncate(self, from_index: int) -> None:
        for e in self.state.log[from_index - 1:]:
            if self._uids.get(e.uid) == e.index:
                del self._uids[e.uid]
        del self.state.log[from_index - 1:]
        self.storage.truncate(from_index)

    def _arm_election(self) -> ArmTimer:
        return ArmTimer(ELECTION_TIMER, self.state.election_timeout_ms)

    def _become_follower(self) -> list[Action]:
        s = self.state
        was = s.role
        s.role = Role.FOLLOWER
        s.next_index.clear()
        s.match_index.clear()
        self._votes.clear()
        if was is Role.FOLLOWER:
            return []
        actions: list[Action] = [BecomeFollower(s.current_term)]
        if was is Role.LEADER:
            actions.append(CancelTimer(HEARTBEAT_TIMER))
            s.current_leader = None
        actions.append(self._arm_election())
        return actions

    # -------------------------------------------------------------- events

    def start(self) -> list[Action]:
        """Arm the first election timer of a freshly booted follower."""
        return [self._arm_election()]

    def bootstrap(self, role: Role, term: int, leader: Optional[str]) -> list[Action]:
        """Install a role chosen by an external manager (experiment start-up)."""
        s = self.state
        if term < s.current_term:
            raise ValueError("bootstrap term behind current term")
        s.current_term = term
        s.voted_for = leader
        self._persist_vote()
        if role is Role.LEADER:
            if leader != self.id:
                raise ValueError("a leader must name itself")
            return self._become_leader()
        s.role = Role.FOLLOWER
        s.current_leader = leader
        return [self._arm_election()]

    def observe_term(self, remote_term: int) -> list[Action]:
        s = self.state
        if remote_term <= s.current_term:
            return []
        s.current_term = remote_term
        s.voted_for = None
        self._persist_vote()
        if s.role is not Role.FOLLOWER:
            return self._become_follower()
        return []

    def handle_request_vote(self, req: RequestVoteReq) -> tuple[RequestVoteResp, list[Action]]:
        actions = self.observe_term(req.term)
        s = self.state
        granted = (
            req.term >= s.current_term
            and s.voted_for in (None, req.candidate_id)
            and (req.last_log_term, req.last_log_index) >= (s.last_log_term, s.last_log_index)
        )
        if granted:
            s.voted_for = req.candidate_id
            self._persist_vote()
            actions.append(self._arm_election())
        return RequestVoteResp(term=s.current_term, vote_granted=granted), actions

    def handle_append_entries(self, req: AppendEntriesReq) -> tuple[AppendEntriesResp, list[Action]]:
        actions = self.observe_term(req.term)
        s = self.state
        if req.term < s.current_term:
            return AppendEntriesResp(s.current_term, False), actions
        if s.role is Role.LEADER:
            # same-term leader cannot exist; refuse rather than mask it
            return AppendEntriesResp(s.current_term, False), actions
        if s.role is Role.CANDIDATE:
            actions += self._become_follower()
        s.current_leader = req.leader_id
        actions.append(self._arm_election())

        prev = req.prev_log_index
        if prev > s.last_log_index or s.term_at(prev) != req.prev_log_term:
            return AppendEntriesResp(s.current_term, False), actions

        for e in req.entries:
            if e.index <= s.last_log_index:
                if s.term_at(e.index) == e.term:
                    continue
                self._truncate(e.index)
            self._append(LogEntry.from_wire(e))

        last_new = prev + len(req.entries)
        if req.leader_commit > s.commit_index:
            new_commit = min(req.leader_commit, last_new)
            if new_commit > s.commit_index:
                s.commit_index = new_commit
                actions += self._apply_actions()
        return AppendEntriesResp(s.current_term, True), actions

    def on_election_timeout(self) -> list[Action]:
        s = self.state
        if s.role is Role.LEADER:
            raise RoleError("leaders do not run elections")
        actions: list[Action] = []
        if s.role is Role.FOLLOWER:
            actions.append(BecomeCandidate(s.current_term + 1))
        s.role = Role.CANDIDATE
        s.current_term += 1
        s.voted_for = self.id
        s.current_leader = None
        self._persist_vote()
        self._votes = {self.id}
        s.election_timeout_ms = self.draw_timeout()
        if len(self._votes) >= majority_threshold(self.cluster_size):
            return actions + self._become_leader()
        req = RequestVoteReq(s.current_term, self.id, s.last_log_index, s.last_log_term)
        actions.append(Broadcast(tuple(self.peers), req))
        actions.append(self._arm_election())
        return actions

    def on_vote_response(self, frm: str, resp: RequestVoteResp) -> list[Action]:
        actions = self.observe_term(resp.term)
        s = self.state
        if s.role is not Role.CANDIDATE or frm not in self.peers:
            return actions
        if resp.term != s.current_term or not resp.vote_granted:
            return actions
        self._votes.add(frm)
        if len(self._votes) >= majority_threshold(self.cluster_size):
            actions += self._become_leader()
        return actions

    def _become_leader(self) -> list[Action]:
        s = self.state
        s.role = Role.LEADER
        s.current_leader = self.id
        self._votes.clear()
        s.next_index = {p: s.last_log_index + 1 for p in self.peers}
        s.match_index = {p: 0 for p in self.peers}
        self._inflight = {p: False for p in self.peers}
        self._unreachable.clear()
        actions: list[Action] = [BecomeLeader(s.current_term), CancelTimer(ELECTION_TIMER)]
        if s.last_log_index > s.commit_index:
            # barrier entry so earlier-term leftovers can commit
            actions += self._new_entry(f"noop:{self.id}:{s.current_term}", NOOP, [])
        actions += self._replicate(self.peers)
        actions.append(ArmTimer(HEARTBEAT_TIMER, self.heartbeat_period()))
        return actions

    def _new_entry(self, uid: str, command: str, parameters: list[str]) -> list[Action]:
        s = self.state
        entry = LogEntry(
            index=s.last_log_index + 1,
            term=s.current_term,
            uid=uid,
            command=command,
            parameters=list(parameters),
            responses_needed=needed_follower_responses(self.cluster_size),
        )
        self._append(entry)
        return self._advance_commit()

    def propose(self, uid: str, command: str, parameters) -> tuple[Outcome, list[Action]]:
        s = self.state
        if s.role is not Role.LEADER:
            return Redirect(s.current_leader), []
        existing = self._uids.get(uid)
        if existing is not None:
            e = s.entry(existing)
            if existing <= s.last_applied:
                return Duplicate(bool(e.success), e.result), []
            return Pending(existing), []
        index = s.last_log_index + 1
        actions = self._new_entry(uid, command, list(parameters))
        idle = [p for p in self.peers if not self._inflight.get(p) and p not in self._unreachable]
        return Pending(index), self._replicate(idle) + actions

    def _append_request(self, peer: str) -> AppendEntriesReq:
        s = self.state
        nxt = s.next_index[peer]
        prev = nxt - 1
        batch = 0 if peer in self._unreachable else self.max_batch
        entries = [e.to_wire() for e in s.log[prev:prev + batch]]
        return AppendEntriesReq(
            term=s.current_term,
            leader_id=self.id,
            prev_log_index=prev,
            prev_log_term=s.term_at(prev),
            entries=entries,
            leader_commit=s.commit_index,
        )

    def _replicate(self, peers) -> list[Action]:
        out: list[Action] = []
        for p in peers:
            out.append(Send(p, self._append_request(p)))
            self._inflight[p] = True
        return out

    def on_append_response(self, frm: str, resp: AppendEntriesResp,
                           sent_prev_log_index: int, sent_entry_count: int) -> list[Action]:
        actions = self.observe_term(resp.term)
        s = self.state
        if s.role is not Role.LEADER or frm not in s.next_index:
            return actions
        if resp.term != s.current_term:
            return actions
        self._inflight[frm] = False
        self._unreachable.discard(frm)
        if resp.success:
            old = s.match_index[frm]
            new = sent_prev_log_index + sent_entry_count
            if new > old:
                s.match_index[frm] = new
                for e in s.log[old:new]:
                    if e.term == s.current_term and e.responses_needed > 0:
                        e.responses_needed -= 1
                actions += self._advance_commit()
            s.next_index[frm] = max(s.next_index[frm], s.match_index[frm] + 1)
            if s.next_index[frm] <= s.last_log_index:
                actions += self._replicate([frm])
        else:
            nxt = max(1, s.next_index[frm] - 1)
            s.next_index[frm] = max(nxt, min(s.match_index[frm] + 1, s.next_index[frm]))
            # probe the next candidate position without waiting for a heartbeat
            actions += self._replicate([frm])
        return actions

    def on_append_failed(self, peer: str) -> list[Action]:
        """The transport could not deliver an AppendEntries to ``peer``.

        Until the peer answers again it only gets entry-free heartbeats, so a
        dead follower doesn't cost the leader a full batch every tick.
        """
        if self.state.role is Role.LEADER and peer in self._inflight:
            self._inflight[peer] = False
            self._unreachable.add(peer)
        return []

    def _advance_commit(self) -> list[Action]:
        s = self.state
        target = s.commit_index
        for e in s.log[s.commit_index:]:
            if e.term == s.current_term and e.responses_needed == 0:
                target = e.index
        if target <= s.commit_index:
            return []
        s.commit_index = target
        return self._apply_actions()

    def on_heartbeat_tick(self) -> list[Action]:
        if self.state.role is not Role.LEADER:
            raise RoleError("only the leader sends heartbeats")
        return self._replicate(self.peers) + [ArmTimer(HEARTBEAT_TIMER, self.heartbeat_period())]

    # ---------------------------------------------------------------- apply

    def apply_committed(self) -> list[LogEntry]:
        """Feed every committed-but-unapplied entry to the state machine."""
        s = self.state
        applied = []
        while s.commit_index > s.last_applied:
            s.last_applied += 1
            e = s.entry(s.last_applied)
            e.success, e.result = self.sm.insert(e)
            applied.append(e)
        return applied

    def _apply_actions(self) -> list[Action]:
        applied = self.apply_committed()
        if not applied:
            return []
        actions: list[Action] = [ApplyCommitted(tuple(applied))]
        if self.state.role is Role.LEADER:
            actions += [ReplyToClient(e.uid, e.index, bool(e.success), e.result)
                        for e in applied if e.command != NOOP]
        return actions
