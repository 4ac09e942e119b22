"""
A small benchmark with a leader failure
=======================================

Spawns three server processes, runs ten clients, kills the leader halfway
through the first second and audits the result. Same thing as

    raftbench run --servers 3 --clients 10 --scenario 1L --runs 1 --iterations 300 --out out/
"""

import json
import random
import tempfile

from raftws.harness import ExperimentConfig, run_trials

cfg = ExperimentConfig(servers=3, clients=10, scenario="1L", runs=1, iterations=300, seed=42,
                       mcast_port=random.randint(20000, 60000), out_dir=tempfile.mkdtemp())
run = run_trials(cfg)[0]

print(f"latency {run.stats.latency_ms:.2f} ms, throughput {run.stats.throughput_ops:.1f} ops/s")
print("killed:", [(k.role, k.target) for k in run.kills], "original leader:", run.leader)
print("committed", run.audit.committed, "of", run.audit.issued, "clean:", run.audit.clean)
print(f"no progress for {run.unavailability_ms:.0f} ms after the kill")
print(json.dumps(run.to_json()["audit"], indent=1))
