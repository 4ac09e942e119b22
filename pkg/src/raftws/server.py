"""Process runtime for one Raft server.

Network handlers, peer responses and timer expiries are all funnelled into
one event queue; a single loop thread feeds them to the
:class:`~raftws.core.RaftNode` and carries out the actions it returns.
Outbound traffic to each peer goes through its own sender thread, so a dead
or slow peer never stalls the loop.

Run standalone with ``python -m raftws.server --help``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import queue
import signal
import sys
import threading
import time
import uuid
from concurrent.futures import Future
from typing import Optional

from raftws.core import (
    ApplyCommitted,
    ArmTimer,
    BecomeFollower,
    BecomeLeader,
    Broadcast,
    CancelTimer,
    Duplicate,
    ELECTION_TIMER,
    HEARTBEAT_TIMER,
    JournalStorage,
    RaftNode,
    Redirect,
    ReplyToClient,
    Role,
    RoleError,
    Send,
)
from raftws.discovery import DEVICE_TYPE, MCAST_GROUP, MCAST_PORT, PROBE_WINDOW_MS, DiscoveryAgent
from raftws.statemachine import KvStateMachine
from raftws.transport import RpcServer, Transport, TransportError
from raftws.wire import (
    Ack,
    AppendEntriesReq,
    AppendEntriesResp,
    ConfigureReq,
    DumpReq,
    DumpResp,
    InsertCommandReq,
    InsertCommandResp,
    Message,
    RequestVoteReq,
    RequestVoteResp,
    ShutdownReq,
    StartReq,
    StatusReq,
    StatusResp,
    WriteStatsReq,
)


log = logging.getLogger(__name__)

CLIENT_WAIT_S = 30.0


class _PeerSender:
    """Delivers requests to one peer; a newer request of a kind replaces an unsent older one."""

    def __init__(self, server: "RaftServer", peer: str) -> None:
        self.server = server
        self.peer = peer
        self.transport = Transport(server.address, default_timeout_ms=server.peer_timeout_ms)
        self._slots: dict[str, tuple] = {}
        self._cv = threading.Condition()
        self._stopped = False
        threading.Thread(target=self._run, name=f"send-{peer}", daemon=True).start()

    def submit(self, body, ctx=None) -> None:
        with self._cv:
            self._slots[body.msg_type] = (body, ctx)
            self._cv.notify()

    def stop(self) -> None:
        with self._cv:
            self._stopped = True
            self._cv.notify()
        self.transport.close()

    def _run(self) -> None:
        while True:
            with self._cv:
                while not self._slots and not self._stopped:
                    self._cv.wait()
                if self._stopped:
                    return
                # votes before log traffic
                kind = "RequestVoteReq" if "RequestVoteReq" in self._slots else next(iter(self._slots))
                body, ctx = self._slots.pop(kind)
            try:
                resp = self.transport.call(self.peer, body)
            except TransportError as exc:
                log.debug("%s -> %s failed: %s", self.server.address, self.peer, exc)
                self.server.events.put(("peer_fail", self.peer, body, ctx))
                continue
            self.server.events.put(("peer_resp", self.peer, resp.body, ctx))


class RaftServer:
    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 0,
        *,
        endpoint_id: Optional[str] = None,
        peers=None,
        seed: Optional[int] = None,
        heartbeat_mode: str = "safe",
        peer_timeout_ms: int = 1000,
        journal: Optional[str] = None,
        discovery: bool = False,
        mcast_group: str = MCAST_GROUP,
        mcast_port: int = MCAST_PORT,
        dynamic_membership: bool = False,
    ) -> None:
        self.rpc = RpcServer(self._on_message, host, port)
        self.address = self.rpc.address
        self.endpoint_id = endpoint_id or f"urn:uuid:{uuid.uuid4()}"
        self.seed = seed
        self.heartbeat_mode = heartbeat_mode
        self.peer_timeout_ms = peer_timeout_ms
        self.journal = journal
        self.dynamic_membership = dynamic_membership
        self.events: queue.Queue = queue.Queue()
        self.node: Optional[RaftNode] = None
        self._senders: dict[str, _PeerSender] = {}
        self._timers: dict[str, float] = {}
        self._waiters: dict[str, list[Future]] = {}
        self._running = False
        self._served = False
        self._stopped = threading.Event()
        self.started_at: Optional[float] = None
        self.stats = {"elections": 0, "leaderships": 0, "commits": 0}
        self._pending_role: tuple = (None, 0, None)
        self.configure(list(peers or []), None)
        self.discovery: Optional[DiscoveryAgent] = None
        if discovery:
            self.discovery = DiscoveryAgent(
                self.endpoint_id, self.address, group=mcast_group, port=mcast_port,
                on_change=self._on_membership if dynamic_membership else None)

    # --------------------------------------------------------- lifecycle

    def configure(self, peers, election_timeout_ms: Optional[int], heartbeat_mode: Optional[str] = None) -> None:
        if heartbeat_mode is not None:
            self.heartbeat_mode = heartbeat_mode
        old = self.node.storage if self.node is not None else None
        if hasattr(old, "close"):
            old.close()
        storage = JournalStorage(self.journal) if self.journal else None
        self.node = RaftNode(self.address, peers, state_machine=KvStateMachine(), seed=self.seed,
                             heartbeat_mode=self.heartbeat_mode, storage=storage)
        if election_timeout_ms is not None:
            # first timeout comes from the manager; later ones are redrawn locally
            self.node.state.election_timeout_ms = election_timeout_ms
        for s in self._senders.values():
            s.stop()
        self._senders = {p: _PeerSender(self, p) for p in self.node.peers}

    def serve(self) -> "RaftServer":
        """Open the listening socket and the event loop; Raft timers stay idle until :meth:`start`."""
        self.rpc.start()
        self._served = True
        threading.Thread(target=self._loop, name=f"raft-{self.address}", daemon=True).start()
        if self.discovery is not None:
            self.discovery.announce_hello()
        return self

    def start(self, role: Optional[Role] = None, term: int = 0, leader: Optional[str] = None) -> None:
        self.events.put(("start", role, term, leader))

    def stop(self, graceful: bool = True) -> None:
        if self.discovery is not None:
            if graceful:
                try:
                    self.discovery.announce_bye()
                except OSError:
                    pass
            self.discovery.close()
        if self._served:
            self.events.put(("stop",))
            self._stopped.wait(2.0)
        for s in self._senders.values():
            s.stop()
        self.rpc.stop()
        close = getattr(self.node.storage, "close", None)
        if close is not None:
            close()

    def _on_membership(self, table) -> None:
        self.events.put(("members", [a for a in table.addresses() if a != self.address]))

    # --------------------------------------------------------- inbound

    def _call_loop(self, item, timeout: float = 5.0):
        fut: Future = Future()
        self.events.put(item + (fut,))
        return fut.result(timeout)

    def _on_message(self, msg: Message):
        body = msg.body
        try:
            if isinstance(body, InsertCommandReq):
                fut: Future = Future()
                self.events.put(("insert", body, fut))
                try:
                    return fut.result(CLIENT_WAIT_S)
                except TimeoutError:
                    return InsertCommandResp(False, None, None)
            if isinstance(body, (AppendEntriesReq, RequestVoteReq, StatusReq, DumpReq,
                                 ConfigureReq, StartReq, WriteStatsReq)):
                return self._call_loop(("rpc", body))
            if isinstance(body, ShutdownReq):
                if body.abrupt:
                    threading.Timer(0.05, os._exit, args=(137,)).start()
                else:
                    threading.Thread(target=self.stop, daemon=True).start()
                return Ack(True)
        except TimeoutError:
            return Ack(False, "server busy")
        return Ack(False, f"unsupported message {body.msg_type}")

    # --------------------------------------------------------- event loop

    def _loop(self) -> None:
        while True:
            now = time.monotonic()
            due = [t for t, deadline in self._timers.items() if deadline <= now]
            for t in sorted(due, key=self._timers.get):
                del self._timers[t]
                self._fire(t)
            timeout = None
            if self._timers:
                timeout = max(0.0, min(self._timers.values()) - time.monotonic())
            try:
                item = self.events.get(timeout=timeout)
            except queue.Empty:
                continue
            try:
                if item[0] == "stop":
                    self._fail_waiters(None)
                    self._stopped.set()
                    return
                self._dispatch(item)
            except Exception:
                log.exception("event %s failed", item[0])
                fut = item[-1]
                if isinstance(fut, Future) and not fut.done():
                    fut.set_result(Ack(False, "internal error"))

    def _fire(self, timer: str) -> None:
        node = self.node
        if not self._running:
            return
        try:
            if timer == ELECTION_TIMER and node.role is not Role.LEADER:
                self.stats["elections"] += 1
                self._act(node.on_election_timeout())
            elif timer == HEARTBEAT_TIMER and node.role is Role.LEADER:
                self._act(node.on_heartbeat_tick())
        except RoleError:
            pass

    def _dispatch(self, item) -> None:
        kind = item[0]
        node = self.node
        if kind == "peer_resp":
            _, peer, body, ctx = item
            if isinstance(body, RequestVoteResp):
                self._act(node.on_vote_response(peer, body))
            elif isinstance(body, AppendEntriesResp):
                self._act(node.on_append_response(peer, body, *ctx))
        elif kind == "peer_fail":
            _, peer, body, ctx = item
            if isinstance(body, AppendEntriesReq):
                self._act(node.on_append_failed(peer))
        elif kind == "insert":
            _, req, fut = item
            if not self._running:
                fut.set_result(InsertCommandResp(False, None, None))
                return
            outcome, actions = node.propose(req.uid, req.command, req.parameters)
            if isinstance(outcome, Redirect):
                fut.set_result(InsertCommandResp(False, None, outcome.leader))
            elif isinstance(outcome, Duplicate):
                fut.set_result(InsertCommandResp(outcome.success, outcome.result, None))
            else:
                self._waiters.setdefault(req.uid, []).append(fut)
            self._act(actions)
        elif kind == "rpc":
            _, body, fut = item
            fut.set_result(self._handle_rpc(body))
        elif kind == "start":
            _, role, term, leader = item
            self._running = True
            self.started_at = time.time()
            if role is None:
                self._act(node.start())
            else:
                self._act(node.bootstrap(role, term, leader))
        elif kind == "members":
            node.set_peers(item[1])
            for p in node.peers:
                if p not in self._senders:
                    self._senders[p] = _PeerSender(self, p)

    def _handle_rpc(self, body):
        node = self.node
        if isinstance(body, AppendEntriesReq):
            if not self._running:
                return AppendEntriesResp(node.state.current_term, False)
            resp, actions = node.handle_append_entries(body)
            self._act(actions)
            return resp
        if isinstance(body, RequestVoteReq):
            if not self._running:
                return RequestVoteResp(node.state.current_term, False)
            resp, actions = node.handle_request_vote(body)
            self._act(actions)
            return resp
        if isinstance(body, StatusReq):
            s = node.state
            return StatusResp(s.role.value, s.current_term, s.current_leader, s.commit_index,
                              s.last_applied, s.last_log_index)
        if isinstance(body, DumpReq):
            s = node.state
            return DumpResp([e.to_wire() for e in s.log], s.commit_index, s.last_applied,
                            dict(node.sm.entries))
        if isinstance(body, ConfigureReq):
            if self._running:
                return Ack(False, "already running")
            self.configure(body.peers, body.election_timeout_ms, body.heartbeat_mode)
            role = Role(body.role)
            self._pending_role = (role, body.term, body.leader_id)
            return Ack(True)
        if isinstance(body, StartReq):
            if self._running:
                return Ack(False, "already running")
            self._running = True
            self.started_at = time.time()
            role, term, leader = self._pending_role
            self._act(node.start() if role is None else node.bootstrap(role, term, leader))
            return Ack(True)
        if isinstance(body, WriteStatsReq):
            self.write_stats(body.path)
            return Ack(True)
        return Ack(False, "unsupported")

    def _act(self, actions) -> None:
        node = self.node
        for a in actions:
            if isinstance(a, Send):
                ctx = None
                if isinstance(a.message, AppendEntriesReq):
                    ctx = (a.message.prev_log_index, len(a.message.entries))
                sender = self._senders.get(a.to)
                if sender is not None:
                    sender.submit(a.message, ctx)
            elif isinstance(a, Broadcast):
                for to in a.to:
                    sender = self._senders.get(to)
                    if sender is not None:
                        sender.submit(a.message)
            elif isinstance(a, ArmTimer):
                self._timers[a.timer] = time.monotonic() + a.delay_ms / 1000.0
            elif isinstance(a, CancelTimer):
                self._timers.pop(a.timer, None)
            elif isinstance(a, ApplyCommitted):
                self.stats["commits"] += len(a.entries)
            elif isinstance(a, ReplyToClient):
                for fut in self._waiters.pop(a.uid, []):
                    if not fut.done():
                        fut.set_result(InsertCommandResp(a.success, a.result, None))
            elif isinstance(a, BecomeLeader):
                self.stats["leaderships"] += 1
                log.info("%s leads term %d", self.address, a.term)
            elif isinstance(a, BecomeFollower):
                self._fail_waiters(node.state.current_leader)

    def _fail_waiters(self, leader: Optional[str]) -> None:
        for futs in self._waiters.values():
            for fut in futs:
                if not fut.done():
                    fut.set_result(InsertCommandResp(False, None, leader))
        self._waiters.clear()

    def write_stats(self, path: str) -> None:
        s = self.node.state
        rec = {
            "address": self.address,
            "endpointId": self.endpoint_id,
            "role": s.role.value,
            "term": s.current_term,
            "commitIndex": s.commit_index,
            "lastApplied": s.last_applied,
            "lastLogIndex": s.last_log_index,
            "stateDigest": self.node.sm.digest(),
            **self.stats,
        }
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(rec, fh, sort_keys=True, indent=1)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="raftws-server", description="Run one Raft device.")
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port", type=int, default=0)
    ap.add_argument("--endpoint-id")
    ap.add_argument("--peers", default="", help="comma-separated host:port list (pinned membership)")
    ap.add_argument("--autostart", action="store_true",
                    help="start as a follower immediately instead of waiting for a manager")
    ap.add_argument("--heartbeat-mode", choices=("safe", "paper"), default="safe")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--journal", help="append-only journal of term, vote and log")
    ap.add_argument("--no-discovery", action="store_true")
    ap.add_argument("--dynamic-membership", action="store_true",
                    help="EXPERIMENTAL: derive the cluster from discovery (unsafe under partitions)")
    ap.add_argument("--mcast-group", default=MCAST_GROUP)
    ap.add_argument("--mcast-port", type=int, default=MCAST_PORT)
    ap.add_argument("--probe-window-ms", type=int, default=PROBE_WINDOW_MS,
                    help="probe window used to seed membership in dynamic mode")
    ap.add_argument("--log-level", default="WARNING")
    args = ap.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(name)s %(message)s")

    peers = [p for p in args.peers.split(",") if p]
    server = RaftServer(
        args.host, args.port, endpoint_id=args.endpoint_id, peers=peers, seed=args.seed,
        heartbeat_mode=args.heartbeat_mode, journal=args.journal,
        discovery=not args.no_discovery, mcast_group=args.mcast_group, mcast_port=args.mcast_port,
        dynamic_membership=args.dynamic_membership,
    ).serve()
    if args.dynamic_membership and server.discovery is not None:
        server.discovery.probe(window_ms=args.probe_window_ms)
    print(f"READY {server.endpoint_id} {server.address} {DEVICE_TYPE}", flush=True)
    if args.autostart:
        server.start()

    done = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: done.set())
    signal.signal(signal.SIGINT, lambda *_: done.set())
    while not done.is_set() and not server._stopped.is_set():
        done.wait(0.2)
    if not server._stopped.is_set():
        server.stop(graceful=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
