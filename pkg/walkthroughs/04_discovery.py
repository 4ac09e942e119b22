"""
Finding Raft devices on the local network
=========================================

Servers announce themselves with Hello and answer Probe with ProbeMatch.
Uses a random multicast port so it won't collide with a real deployment.
"""

import random
import time

from raftws.discovery import DiscoveryAgent

port = random.randint(20000, 60000)
devices = [DiscoveryAgent(f"dev-{i}", f"127.0.0.1:{7000 + i}", port=port) for i in range(3)]
watcher = DiscoveryAgent("watcher", port=port)

for d in devices:
    d.announce_hello()
time.sleep(0.3)
print("heard via Hello:", sorted(watcher.table.addresses()))

# A newcomer that missed the Hellos can ask directly.
newcomer = DiscoveryAgent("newcomer", port=port, listen=False)
matches = newcomer.probe(window_ms=300)
print("probe answers:", sorted(m.service_address for m in matches))

# Bye removes a device from everyone's table.
devices[0].announce_bye()
time.sleep(0.3)
print("after Bye:", sorted(watcher.table.addresses()))

for a in devices + [watcher, newcomer]:
    a.close()
