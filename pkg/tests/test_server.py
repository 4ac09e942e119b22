import random
import signal
import subprocess
import sys
import time

import pytest

from raftws.discovery import DiscoveryAgent
from raftws.server import RaftServer
from raftws.transport import Transport
from raftws.wire import (
    Ack,
    ConfigureReq,
    DumpReq,
    InsertCommandReq,
    ShutdownReq,
    StartReq,
    StatusReq,
    WriteStatsReq,
)


def wait_for(cond, timeout=3.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if cond():
            return True
        time.sleep(0.02)
    return cond()


@pytest.fixture
def cluster():
    made = []

    def make(n, **kw):
        servers = [RaftServer(seed=i, **kw) for i in range(n)]
        addrs = [s.address for s in servers]
        for s in servers:
            s.configure(addrs, None)
            s.serve()
        made.extend(servers)
        return servers

    yield make
    for s in made:
        s.stop()


@pytest.fixture
def t():
    tr = Transport("test")
    yield tr
    tr.close()


def call(t, addr, body):
    return t.call(addr, body, 2000).body


def manager_start(t, servers, timeouts=(200, 250, 280)):
    addrs = [s.address for s in servers]
    leader = addrs[0]
    for s, to in zip(servers, timeouts):
        role = "Leader" if s.address == leader else "Follower"
        assert call(t, s.address, ConfigureReq(role, 1, leader, addrs, to, "safe")) == Ack(True)
    for s in servers:
        assert call(t, s.address, StartReq()) == Ack(True)
    return leader


def test_manager_designated_leader_serves(cluster, t):
    servers = cluster(3)
    leader = manager_start(t, servers)
    st = call(t, leader, StatusReq())
    assert st.role == "Leader" and st.term == 1
    assert call(t, leader, InsertCommandReq("u1", "PUT", ["k", "v"])).success
    follower = servers[1].address
    redirect = call(t, follower, InsertCommandReq("u2", "PUT", ["k", "w"]))
    assert not redirect.success and redirect.leader_address == leader
    assert wait_for(lambda: call(t, follower, StatusReq()).commit_index == 1)
    dump = call(t, follower, DumpReq())
    assert dump.state == {"k": "v"} and [e.uid for e in dump.entries] == ["u1"]


def test_configure_refused_once_running(cluster, t):
    servers = cluster(3)
    manager_start(t, servers)
    again = call(t, servers[0].address, ConfigureReq("Follower", 2, None, [], 200, "safe"))
    assert not again.ok
    assert not call(t, servers[0].address, StartReq()).ok


def test_duplicate_uid_applied_once(cluster, t):
    servers = cluster(3)
    leader = manager_start(t, servers)
    first = call(t, leader, InsertCommandReq("dup", "DEL", ["missing"]))
    second = call(t, leader, InsertCommandReq("dup", "DEL", ["missing"]))
    assert (first.success, first.result) == (second.success, second.result) == (False, "NOT_FOUND")
    assert call(t, leader, StatusReq()).last_log_index == 1


def test_unstarted_server_does_not_vote_or_accept(cluster, t):
    (s,) = cluster(1)
    resp = call(t, s.address, InsertCommandReq("u", "PUT", ["k", "v"]))
    assert not resp.success and resp.leader_address is None


def test_self_elected_cluster_and_failover(cluster, t):
    servers = cluster(3)
    for s in servers:
        s.start()
    assert wait_for(lambda: any(s.node.state.role.value == "Leader" for s in servers))
    leader = next(s for s in servers if s.node.state.role.value == "Leader")
    assert call(t, leader.address, InsertCommandReq("a", "PUT", ["k", "1"])).success
    leader.stop(graceful=False)
    rest = [s for s in servers if s is not leader]
    assert wait_for(lambda: any(s.node.state.role.value == "Leader" for s in rest))
    new = next(s for s in rest if s.node.state.role.value == "Leader")
    assert call(t, new.address, InsertCommandReq("b", "PUT", ["k", "2"])).success
    assert wait_for(lambda: all(s.node.sm.entries == {"k": "2"} for s in rest))


def test_write_stats(cluster, t, tmp_path):
    servers = cluster(1)
    servers[0].start()
    assert wait_for(lambda: servers[0].node.state.role.value == "Leader")
    path = tmp_path / "deep" / "stats.json"
    assert call(t, servers[0].address, WriteStatsReq(str(path))).ok
    assert '"role": "Leader"' in path.read_text()


def test_journal_survives_restart(tmp_path, t):
    journal = tmp_path / "s.journal"
    s = RaftServer(journal=str(journal)).serve()
    s.start()
    assert wait_for(lambda: s.node.state.role.value == "Leader")
    assert call(t, s.address, InsertCommandReq("u1", "PUT", ["k", "v"])).success
    term = s.node.state.current_term
    s.stop()
    s2 = RaftServer(journal=str(journal))
    try:
        assert [e.uid for e in s2.node.state.log] == ["u1"]
        assert s2.node.state.current_term == term
    finally:
        s2.stop()


def test_process_entry_point_with_bye_on_sigterm(t):
    port = random.randint(20000, 60000)
    watcher = DiscoveryAgent("watcher", port=port)
    proc = subprocess.Popen([sys.executable, "-m", "raftws.server", "--autostart", "--endpoint-id", "urn:x",
                             "--mcast-port", str(port)], stdout=subprocess.PIPE, text=True)
    try:
        ready = proc.stdout.readline().split()
        assert ready[0] == "READY" and ready[1] == "urn:x"
        addr = ready[2]
        assert wait_for(lambda: "urn:x" in watcher.table)
        assert wait_for(lambda: call(t, addr, StatusReq()).role == "Leader")
        assert call(t, addr, InsertCommandReq("u", "PUT", ["k", "v"])).success
        proc.send_signal(signal.SIGTERM)
        assert proc.wait(5) == 0
        assert wait_for(lambda: "urn:x" not in watcher.table)
    finally:
        if proc.poll() is None:
            proc.kill()
        proc.stdout.close()
        watcher.close()


def test_abrupt_shutdown_exits_without_bye(t):
    port = random.randint(20000, 60000)
    watcher = DiscoveryAgent("watcher", port=port)
    proc = subprocess.Popen([sys.executable, "-m", "raftws.server", "--endpoint-id", "urn:y",
                             "--mcast-port", str(port)], stdout=subprocess.PIPE, text=True)
    try:
        addr = proc.stdout.readline().split()[2]
        assert wait_for(lambda: "urn:y" in watcher.table)
        assert call(t, addr, ShutdownReq(abrupt=True)).ok
        assert proc.wait(5) == 137
        time.sleep(0.3)
        assert "urn:y" in watcher.table
    finally:
        if proc.poll() is None:
            proc.kill()
        proc.stdout.close()
        watcher.close()
