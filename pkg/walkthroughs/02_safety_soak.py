"""
Hunting for safety bugs with random fault schedules
===================================================

Each seed expands into message loss, delays, crashes, restarts and
partitions. The checker watches every append, vote and apply.
"""

from collections import Counter

from raftws.simnet import Schedule, random_schedule, run_schedule

found = Counter()
for seed in range(200):
    r = run_schedule(5, random_schedule(seed), record_trace=False)
    for v in r.violations:
        found[v.invariant] += 1
print("violations over 200 schedules:", dict(found) or "none")

# A schedule is plain data, so a failing one can be saved and replayed.
sched = random_schedule(3)
print(sched.to_json()[:200], "...")


# Turning off durable state (a restart forgets term, vote and log) lets a
# committed write vanish. s1 and s2 commit "a", then s2 forgets it and s1
# dies, so s3 can win s2's vote with an empty log.
def scenario(durable):
    return Schedule(seed=3, partitions=[(0, [["s1", "s2"], ["s3"]]), (900, [])],
                    crashes=[(800, "s2"), (900, "s1")], restarts=[(850, "s2")],
                    proposals=[(400, "a", "PUT", ["k", "a"]), (1500, "b", "PUT", ["k", "b"])],
                    duration_ms=3000, durable=durable)


for durable in (True, False):
    r = run_schedule(3, scenario(durable), record_trace=False)
    print(f"durable={durable}:", [v.invariant for v in r.violations] or "clean")
