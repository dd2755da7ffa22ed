"""Deterministic discrete-event network fabric.

Nodes carry a VLAN and an air-gap partition label. Delivery takes exactly one
tick. Datagrams due on the same tick are released in (sent_at, src, dst,
enqueue sequence) order so a run never depends on dict iteration order.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

from .errors import DuplicateNode, UnknownNode

LINK_LATENCY = 1


class Proto(str, Enum):
    UDP = "UdpLike"
    SESSION = "SessionLike"
    SNMP = "SnmpLike"


class DropReason(str, Enum):
    AIR_GAP = "AirGap"
    VLAN_POLICY = "VlanPolicy"
    NO_PATH = "NoPath"


@dataclass(frozen=True)
class Datagram:
    src: str
    dst: str
    proto: Proto
    payload: bytes
    sent_at: int

    @property
    def size(self) -> int:
        return len(self.payload)


@dataclass(frozen=True)
class DeliveryOutcome:
    queued: bool
    due: int | None = None
    reason: DropReason | None = None


@dataclass
class VlanPolicy:
    """Directed inter-VLAN allow rules; anything not listed is denied."""

    rules: dict[tuple[str, str], bool] = field(default_factory=dict)

    def allow(self, a: str, b: str, both: bool = False) -> "VlanPolicy":
        self.rules[(a, b)] = True
        if both:
            self.rules[(b, a)] = True
        return self

    def deny(self, a: str, b: str) -> "VlanPolicy":
        self.rules[(a, b)] = False
        return self

    def permits(self, src_vlan: str, dst_vlan: str) -> bool:
        if src_vlan == dst_vlan:
            return True
        return self.rules.get((src_vlan, dst_vlan), False)


@dataclass(frozen=True)
class NodeInfo:
    vlan: str
    partition: str


EventSink = Callable[[str, dict], None]


class Topology:
    def __init__(self, on_event: EventSink | None = None):
        self.nodes: dict[str, NodeInfo] = {}
        self.links: set[frozenset[str]] = set()
        self.clock = 0
        self.events: list[tuple[str, dict]] = []
        self._on_event = on_event
        self._pending: list[tuple[int, int, str, str, int, Datagram]] = []
        self._seq = 0

    # construction -----------------------------------------------------
    @property
    def vlan_assignment(self) -> dict[str, str]:
        return {n: info.vlan for n, info in self.nodes.items()}

    @property
    def airgap_partition(self) -> dict[str, str]:
        return {n: info.partition for n, info in self.nodes.items()}

    def add_node(self, node_id: str, vlan: str, partition: str) -> "Topology":
        if node_id in self.nodes:
            raise DuplicateNode(node_id)
        self.nodes[node_id] = NodeInfo(vlan, partition)
        return self

    def link(self, a: str, b: str) -> "Topology":
        for n in (a, b):
            self._require(n)
        if a != b:
            self.links.add(frozenset((a, b)))
        return self

    def _require(self, node_id: str) -> NodeInfo:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(node_id) from None

    def neighbours(self, node_id: str) -> list[str]:
        out = []
        for pair in self.links:
            if node_id in pair:
                out.extend(n for n in pair if n != node_id)
        return sorted(out)

    def path_exists(self, src: str, dst: str) -> bool:
        if src == dst:
            return True
        seen = {src}
        queue = deque([src])
        while queue:
            cur = queue.popleft()
            for nxt in self.neighbours(cur):
                if nxt == dst:
                    return True
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        return False

    # policy -----------------------------------------------------------
    def drop_reason(self, policy: VlanPolicy | None, src: str, dst: str) -> DropReason | None:
        a, b = self._require(src), self._require(dst)
        if a.partition != b.partition:
            return DropReason.AIR_GAP
        if policy is not None and not policy.permits(a.vlan, b.vlan):
            return DropReason.VLAN_POLICY
        if not self.path_exists(src, dst):
            return DropReason.NO_PATH
        return None

    def reachable(self, policy: VlanPolicy | None, src: str, dst: str, proto: Proto = Proto.UDP) -> bool:
        # proto is accepted for interface symmetry; policy is protocol-agnostic.
        return self.drop_reason(policy, src, dst) is None

    # traffic ----------------------------------------------------------
    def _emit(self, kind: str, fields: dict) -> None:
        self.events.append((kind, fields))
        if self._on_event is not None:
            self._on_event(kind, fields)

    def send(self, policy: VlanPolicy | None, datagram: Datagram) -> DeliveryOutcome:
        self._require(datagram.src)
        reason = self.drop_reason(policy, datagram.src, datagram.dst)
        fields = {
            "src": datagram.src,
            "dst": datagram.dst,
            "proto": datagram.proto.value,
            "size": datagram.size,
            "sent_at": datagram.sent_at,
        }
        if reason is not None:
            self._emit("Dropped", {**fields, "reason": reason.value})
            return DeliveryOutcome(False, reason=reason)
        due = datagram.sent_at + LINK_LATENCY
        self._seq += 1
        heapq.heappush(self._pending, (due, datagram.sent_at, datagram.src, datagram.dst, self._seq, datagram))
        self._emit("Sent", {**fields, "due": due})
        return DeliveryOutcome(True, due=due)

    @property
    def pending(self) -> int:
        return len(self._pending)

    def step(self) -> list[Datagram]:
        self.clock += 1
        delivered = []
        while self._pending and self._pending[0][0] <= self.clock:
            *_, dgram = heapq.heappop(self._pending)
            delivered.append(dgram)
            self._emit(
                "Delivered",
                {
                    "src": dgram.src,
                    "dst": dgram.dst,
                    "proto": dgram.proto.value,
                    "size": dgram.size,
                    "sent_at": dgram.sent_at,
                    "payload": dgram.payload.hex(),
                },
            )
        return delivered


def add_node(topology: Topology, node_id: str, vlan: str, airgap_partition: str) -> Topology:
    return topology.add_node(node_id, vlan, airgap_partition)


def reachable(topology: Topology, policy: VlanPolicy | None, src: str, dst: str, proto: Proto = Proto.UDP) -> bool:
    return topology.reachable(policy, src, dst, proto)


def send(topology: Topology, policy: VlanPolicy | None, datagram: Datagram) -> DeliveryOutcome:
    return topology.send(policy, datagram)


def step(topology: Topology) -> list[Datagram]:
    return topology.step()


def build(nodes: Iterable[tuple[str, str, str]], links: Iterable[tuple[str, str]] = ()) -> Topology:
    topo = Topology()
    for node_id, vlan, partition in nodes:
        topo.add_node(node_id, vlan, partition)
    for a, b in links:
        topo.link(a, b)
    return topo
