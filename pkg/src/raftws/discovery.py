"""Multicast membership in the style of WS-Discovery.

Servers announce themselves with ``Hello`` when they come up and ``Bye``
when they leave gracefully, and answer ``Probe`` datagrams with a unicast
``ProbeMatch``. Every listener folds these events into a :class:`PeerTable`.
Datagrams use the same JSON frame as the TCP protocol.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from raftws.wire import Bye, DecodeError, Hello, Message, Probe, ProbeMatch, decode, encode

log = logging.getLogger(__name__)

DEVICE_TYPE = "Raft_Device"
MCAST_GROUP = "239.255.255.250"
MCAST_PORT = 3702
PROBE_WINDOW_MS = 500


@dataclass
class Peer:
    service_address: str
    device_type: str
    last_seen: float


@dataclass
class PeerTable:
    """Devices currently known, keyed by endpoint id, in detection order."""

    peers: dict[str, Peer] = field(default_factory=dict)
    device_type: str = DEVICE_TYPE
    malformed: int = 0

    def __len__(self) -> int:
        return len(self.peers)

    def __contains__(self, endpoint_id: str) -> bool:
        return endpoint_id in self.peers

    def addresses(self) -> list[str]:
        return [p.service_address for p in self.peers.values()]

    def endpoint_for(self, address: str) -> Optional[str]:
        for eid, p in self.peers.items():
            if p.service_address == address:
                return eid
        return None


def handle_discovery_event(table: PeerTable, event, now: Optional[float] = None) -> PeerTable:
    """Fold one discovery event into ``table`` (in place) and return it.

    Hello and ProbeMatch upsert and refresh ``last_seen``; Bye removes.
    Anything else, or an announcement for another device type, is counted
    as malformed or ignored respectively.
    """
    now = time.time() if now is None else now
    if isinstance(event, Message):
        event = event.body
    if isinstance(event, (Hello, ProbeMatch)):
        if event.device_type != table.device_type:
            return table
        if not event.endpoint_id or not event.service_address:
            table.malformed += 1
            return table
        peer = table.peers.get(event.endpoint_id)
        if peer is None:
            table.peers[event.endpoint_id] = Peer(event.service_address, event.device_type, now)
        else:
            peer.service_address = event.service_address
            peer.last_seen = max(peer.last_seen, now)
    elif isinstance(event, Bye):
        table.peers.pop(event.endpoint_id, None)
    elif isinstance(event, Probe):
        pass
    else:
        table.malformed += 1
    return table


def _mcast_listener(group: str, port: int, iface: str) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM, socket.IPPROTO_UDP)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    if hasattr(socket, "SO_REUSEPORT"):
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEPORT, 1)
    sock.bind(("", port))
    mreq = struct.pack("4s4s", socket.inet_aton(group), socket.inet_aton(iface))
    sock.setsockopt(socket.IPPROTO_IP, socket.IP_ADD_MEMBERSHIP, mreq)
    return sock


def _mcast_sender(iface: str) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM, socket.IPPROTO_UDP)
    sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_IF, socket.inet_aton(iface))
    sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_LOOP, 1)
    sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_TTL, 1)
    sock.bind((iface, 0))
    return sock


class DiscoveryAgent:
    """Socket side of discovery for one participant.

    A *device* agent (``service_address`` given) answers probes and can
    announce itself; any agent with ``listen=True`` keeps ``table`` current
    from the multicast stream and calls ``on_change(table)`` after updates.
    """

    def __init__(
        self,
        endpoint_id: str,
        service_address: Optional[str] = None,
        *,
        device_type: str = DEVICE_TYPE,
        group: str = MCAST_GROUP,
        port: int = MCAST_PORT,
        iface: str = "127.0.0.1",
        listen: bool = True,
        on_change: Optional[Callable[[PeerTable], None]] = None,
    ) -> None:
        self.endpoint_id = endpoint_id
        self.service_address = service_address
        self.device_type = device_type
        self.group, self.port, self.iface = group, port, iface
        self.table = PeerTable(device_type=DEVICE_TYPE)
        self.on_change = on_change
        self._lock = threading.Lock()
        self._tx = _mcast_sender(iface)
        self._rx: Optional[socket.socket] = None
        self._closed = threading.Event()
        if listen:
            self._rx = _mcast_listener(group, port, iface)
            self._rx.settimeout(0.2)
            threading.Thread(target=self._listen, name=f"discovery-{endpoint_id}", daemon=True).start()

    def _send(self, body, addr=None) -> None:
        frame = encode(Message(body=body, msg_id=f"{self.endpoint_id}-{time.monotonic_ns()}",
                               sender=self.endpoint_id))
        self._tx.sendto(frame, addr or (self.group, self.port))

    def announce_hello(self) -> None:
        if self.service_address is None:
            raise RuntimeError("only devices announce themselves")
        self._send(Hello(self.endpoint_id, self.device_type, self.service_address))

    def announce_bye(self) -> None:
        self._send(Bye(self.endpoint_id))

    def _match(self) -> ProbeMatch:
        return ProbeMatch(self.endpoint_id, self.device_type, self.service_address)

    def _listen(self) -> None:
        assert self._rx is not None
        while not self._closed.is_set():
            try:
                data, src = self._rx.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            try:
                msg = decode(data)
            except DecodeError:
                with self._lock:
                    self.table.malformed += 1
                continue
            body = msg.body
            if isinstance(body, Probe):
                if self.service_address is not None and body.device_type == self.device_type:
                    try:
                        self._send(self._match(), src)
                    except OSError as exc:
                        log.warning("probe reply failed: %s", exc)
                continue
            if getattr(body, "endpoint_id", None) == self.endpoint_id:
                continue
            with self._lock:
                before = dict((k, v.service_address) for k, v in self.table.peers.items())
                handle_discovery_event(self.table, body)
                changed = before != {k: v.service_address for k, v in self.table.peers.items()}
            if changed and self.on_change is not None:
                self.on_change(self.table)

    def probe(self, type_filter: str = DEVICE_TYPE, window_ms: float = PROBE_WINDOW_MS) -> list[ProbeMatch]:
        """Multicast one Probe and gather ProbeMatch replies for ``window_ms``.

        Matches are de-duplicated by endpoint id and folded into ``table``.
        """
        sock = _mcast_sender(self.iface)
        try:
            frame = encode(Message(body=Probe(type_filter), msg_id=f"probe-{time.monotonic_ns()}",
                                   sender=self.endpoint_id))
            sock.sendto(frame, (self.group, self.port))
            deadline = time.monotonic() + window_ms / 1000.0
            found: dict[str, ProbeMatch] = {}
            while True:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                sock.settimeout(remaining)
                try:
                    data, _ = sock.recvfrom(65535)
                except socket.timeout:
                    break
                try:
                    body = decode(data).body
                except DecodeError:
                    with self._lock:
                        self.table.malformed += 1
                    continue
                if isinstance(body, ProbeMatch) and body.device_type == type_filter:
                    found.setdefault(body.endpoint_id, body)
        finally:
            sock.close()
        with self._lock:
            for m in found.values():
                handle_discovery_event(self.table, m)
        if found and self.on_change is not None:
            self.on_change(self.table)
        return list(found.values())

    def close(self) -> None:
        self._closed.set()
        for s in (self._rx, self._tx):
            if s is not None:
                try:
                    s.close()
                except OSError:
                    pass
