"""Client side: find Raft devices, insert commands, follow redirects.

A session talks to one server at a time. A ``leaderAddress`` in a reply
moves the session to the leader at once; a timeout or lost connection
makes it wait a random interval and try a different known server. Every
retry of one logical operation carries the same uid, which is what lets the
servers apply it at most once.
"""

from __future__ import annotations

import logging
import random
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable, Optional

from raftws.discovery import DEVICE_TYPE, MCAST_GROUP, MCAST_PORT, PROBE_WINDOW_MS, DiscoveryAgent, Peer, PeerTable
from raftws.transport import Transport, TransportError
from raftws.wire import EndOfWorkload, InsertCommandReq, InsertCommandResp

log = logging.getLogger(__name__)

MAX_BACKOFF_MS = 1000
REQUEST_TIMEOUT_MS = 1000
MAX_ATTEMPTS = 10


class NoServersFound(RuntimeError):
    pass


class RetriesExhausted(RuntimeError):
    def __init__(self, uid: str, attempts: int) -> None:
        super().__init__(f"operation {uid} gave up after {attempts} attempts")
        self.uid = uid
        self.attempts = attempts
        self.partial: Optional["WorkloadResult"] = None


@dataclass
class ClientSession:
    client_id: str = field(default_factory=lambda: f"client-{uuid.uuid4().hex[:8]}")
    seed: Optional[int] = None
    max_backoff_ms: int = MAX_BACKOFF_MS
    request_timeout_ms: int = REQUEST_TIMEOUT_MS
    max_attempts: int = MAX_ATTEMPTS
    known: PeerTable = field(default_factory=PeerTable)
    current_target: Optional[str] = None
    sleep: Callable[[float], None] = time.sleep
    # what happened, for tests and post-run audits
    requests: list[tuple[str, str]] = field(default_factory=list)
    backoffs_ms: list[float] = field(default_factory=list)
    uids: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.rng = random.Random(self.seed)
        self.transport = Transport(self.client_id, default_timeout_ms=self.request_timeout_ms)

    def adopt(self, addresses, target: Optional[str] = None) -> "ClientSession":
        """Add servers learned out of band (e.g. from an experiment manager)."""
        for addr in addresses:
            self._remember(addr)
        if target is not None:
            self._remember(target)
            self.current_target = target
        elif self.current_target is None and len(self.known):
            self.current_target = self.known.addresses()[0]
        return self

    def _remember(self, address: str) -> None:
        if self.known.endpoint_for(address) is None:
            self.known.peers[f"addr:{address}"] = Peer(address, DEVICE_TYPE, time.time())

    def new_uid(self) -> str:
        return str(uuid.UUID(int=self.rng.getrandbits(128), version=4))

    def close(self) -> None:
        self.transport.close()


def client_discover(
    session: ClientSession,
    *,
    group: str = MCAST_GROUP,
    port: int = MCAST_PORT,
    window_ms: float = PROBE_WINDOW_MS,
    pick: str = "first",
) -> ClientSession:
    """Fill ``session.known`` from Hello traffic plus one Probe round.

    With ``pick="first"`` the first device detected becomes the current
    target; ``pick="random"`` chooses among all of them with the session rng.
    """
    if pick not in ("first", "random"):
        raise ValueError(f"pick must be 'first' or 'random', not {pick!r}")
    agent = DiscoveryAgent(session.client_id, group=group, port=port)
    try:
        agent.probe(DEVICE_TYPE, window_ms)
        for eid, peer in agent.table.peers.items():
            if session.known.endpoint_for(peer.service_address) is None:
                session.known.peers.setdefault(eid, peer)
    finally:
        agent.close()
    if not len(session.known):
        raise NoServersFound("no Raft devices answered the probe")
    if session.current_target is None:
        addrs = session.known.addresses()
        session.current_target = addrs[0] if pick == "first" else session.rng.choice(addrs)
    return session


def _switch_target(session: ClientSession) -> None:
    others = [a for a in session.known.addresses() if a != session.current_target]
    if others:
        session.current_target = session.rng.choice(others)


def insert_command(session: ClientSession, command: str, parameters, uid: Optional[str] = None
                   ) -> tuple[Optional[str], bool]:
    """Run one command through the cluster and return its ``(result, success)``.

    A committed command whose execution failed (``DEL`` of a missing key)
    still returns, with ``success`` false. Raises :class:`RetriesExhausted`
    once ``max_attempts`` requests went unanswered.
    """
    if session.current_target is None:
        raise NoServersFound("session has no known servers")
    uid = uid or session.new_uid()
    session.uids.append(uid)
    req = InsertCommandReq(uid, command, list(parameters))
    for _ in range(session.max_attempts):
        target = session.current_target
        session.requests.append((target, uid))
        try:
            resp = session.transport.call(target, req, session.request_timeout_ms).body
        except TransportError as exc:
            log.debug("%s: %s", session.client_id, exc)
            resp = None
        if isinstance(resp, InsertCommandResp):
            if resp.leader_address and resp.leader_address != target:
                session._remember(resp.leader_address)
                session.current_target = resp.leader_address
                continue
            if resp.result is not None:
                return resp.result, resp.success
        delay = session.max_backoff_ms * (1.0 - session.rng.random())  # (0, max]
        session.backoffs_ms.append(delay)
        session.sleep(delay / 1000.0)
        _switch_target(session)
    raise RetriesExhausted(uid, session.max_attempts)


@dataclass
class WorkloadResult:
    client_id: str
    samples_ms: list[float]
    started: float
    finished: float
    completions: list[float]  # monotonic time each operation returned
    partial: bool = False


def run_workload(
    session: ClientSession,
    iterations: int,
    keyspace: Optional[int] = None,
    notify: Optional[str] = None,
) -> WorkloadResult:
    """Issue ``iterations`` back-to-back PUTs and time each one.

    Keys are unique per operation unless ``keyspace`` bounds them. When
    ``notify`` names a manager address an EndOfWorkload is sent there at the
    end, marked partial if the workload was cut short.
    """
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    res = WorkloadResult(session.client_id, [], time.monotonic(), 0.0, [])
    try:
        for i in range(iterations):
            key = f"{session.client_id}-{i}" if keyspace is None else f"k{session.rng.randrange(keyspace)}"
            t0 = time.monotonic()
            insert_command(session, "PUT", [key, str(i)])
            t1 = time.monotonic()
            res.samples_ms.append((t1 - t0) * 1000.0)
            res.completions.append(t1)
    except RetriesExhausted as exc:
        res.partial = True
        exc.partial = res
        raise
    finally:
        res.finished = time.monotonic()
        if notify is not None:
            try:
                session.transport.call(notify, EndOfWorkload(session.client_id, len(res.samples_ms), res.partial))
            except TransportError as exc:
                log.warning("end-of-workload notification lost: %s", exc)
    return res
