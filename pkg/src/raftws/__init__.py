"""Raft replication for networked devices, with multicast discovery.

The consensus core (:mod:`raftws.core`) is a pure transition function; the
simulator (:mod:`raftws.simnet`) and the process runtime
(:mod:`raftws.server`) both drive it.
"""

from raftws.core import RaftNode, Role, ServerState, majority_threshold
from raftws.simnet import Schedule, check_invariants, run_schedule
from raftws.statemachine import KvStateMachine, replay

__version__ = "0.1.0"

__all__ = [
    "KvStateMachine",
    "RaftNode",
    "Role",
    "Schedule",
    "ServerState",
    "check_invariants",
    "majority_threshold",
    "replay",
    "run_schedule",
]
