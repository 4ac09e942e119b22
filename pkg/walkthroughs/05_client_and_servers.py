"""
Three real servers and a client
===============================

The servers run in this process on threads but talk over TCP exactly
as separate processes would.
"""

import time

from raftws.client import ClientSession, insert_command, run_workload
from raftws.core import Role
from raftws.server import RaftServer

servers = [RaftServer(seed=i) for i in range(3)]
addrs = [s.address for s in servers]
for s in servers:
    s.configure(addrs, None)
    s.serve()
for s in servers:
    s.start()

try:
    # Aim at a follower on purpose; the reply redirects us to the leader.
    time.sleep(1.0)
    leader = next(s for s in servers if s.node.state.role is Role.LEADER)
    follower = next(s for s in servers if s is not leader)
    session = ClientSession(seed=1).adopt(addrs, target=follower.address)

    print(insert_command(session, "PUT", ["x", "1"]))
    print(insert_command(session, "DEL", ["x"]))
    print(insert_command(session, "DEL", ["x"]))  # committed, but the key is gone
    print("requests sent:", session.requests)

    # Same uid twice: the second is answered from the first result.
    uid = session.new_uid()
    print(insert_command(session, "PUT", ["y", "2"], uid=uid))
    print(insert_command(session, "PUT", ["y", "3"], uid=uid))

    res = run_workload(session, 50)
    print(f"50 PUTs, median {sorted(res.samples_ms)[25]:.2f} ms")
    time.sleep(0.3)
    print("digests:", {s.endpoint_id: s.node.sm.digest()[:12] for s in servers})
finally:
    for s in servers:
        s.stop()
    session.close()
