"""Simulation context shared by the attacker, the defenses and the run loop.

A :class:`World` owns the topology, the hosts, the defense policy and the
event log. All clock movement goes through :meth:`World.tick`, which runs the
scheduled defenses and due environment events before anything else can act.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable

from . import defense, hostmodel
from .cryptokit import firmware_tag
from .defense import DefensePolicy, DetectionEvent, DetectionLedger, TrafficMonitor
from .disk import Provenance
from .errors import AuthRejected, FirmwareAuthBlocked, UnknownNode
from .eventlog import EventLog
from .hostmodel import Host, HostKind, UsbDevice
from .netsim import Datagram, Proto, Topology


class OutOfTime(Exception):
    """Raised when an action would need ticks beyond ``max_ticks``."""


@dataclass
class Shipment:
    name: str
    dest: str
    device: UsbDevice
    arrival: int
    original_files: dict[str, bytes] = field(default_factory=dict)
    delivered: bool = False
    interdicted: bool = False


@dataclass
class Activity:
    tick: int
    verb: str
    target: str
    args: dict[str, str] = field(default_factory=dict)


UsbListener = Callable[[Host, UsbDevice, hostmodel.PortState], None]
BootListener = Callable[[Host, list], None]


class World:
    def __init__(
        self,
        topology: Topology,
        hosts: dict[str, Host],
        policy: DefensePolicy | None = None,
        *,
        seed: int = 0,
        max_ticks: int = 10_000,
        log: EventLog | None = None,
    ):
        self.topology = topology
        self.hosts = hosts
        self.policy = policy or DefensePolicy()
        self.seed = seed
        self.max_ticks = max_ticks
        self.log = log if log is not None else EventLog()
        self.ledger = DetectionLedger(self._on_detection)
        self.monitor = TrafficMonitor(self.policy, self.ledger) if self.policy.traffic_monitor else None
        self.shipments: dict[str, Shipment] = {}
        self.activities: list[Activity] = []
        self.usb_listeners: list[UsbListener] = []
        self.boot_listeners: list[BootListener] = []
        self.devices: dict[str, UsbDevice] = {}
        self.baseline: defense.Baseline | None = None
        self.deliveries: dict[int, list[Datagram]] = {}
        topology._on_event = self._on_net_event
        for host_id in hosts:
            if host_id not in topology.nodes:
                raise UnknownNode(host_id)
        for host in hosts.values():
            host.hardening = self.policy.host_hardening(host.hardening.buffer_capacity, host.hardening.aslr_entropy_bits)
            if not host.booted and host.disk.bootable_index() is not None:
                hostmodel.boot(host)
        if self.policy.dark_region_monitor:
            self.baseline = defense.take_baseline(self.hosts.values(), self.clock)

    # basics -------------------------------------------------------------
    @property
    def clock(self) -> int:
        return self.topology.clock

    def emit(self, kind: str, **fields):
        return self.log.append(self.clock, kind, **fields)

    def rng(self, name: str) -> random.Random:
        return random.Random(f"{self.seed}:{name}")

    def host(self, host_id: str) -> Host:
        try:
            return self.hosts[host_id]
        except KeyError:
            raise UnknownNode(host_id) from None

    def partition(self, node: str) -> str:
        return self.topology.nodes[node].partition

    def reachable(self, src: str, dst: str, proto: Proto = Proto.UDP) -> bool:
        return self.topology.reachable(self.policy.effective_vlan_policy(), src, dst, proto)

    def drop_reason(self, src: str, dst: str):
        return self.topology.drop_reason(self.policy.effective_vlan_policy(), src, dst)

    def _on_detection(self, event: DetectionEvent) -> None:
        self.log.append(
            event.time,
            "Detection",
            detector=event.detector,
            host=event.host,
            stage=event.implicated_stage,
            technique=event.technique,
            details=event.details,
        )

    def _on_net_event(self, kind: str, fields: dict) -> None:
        self.log.append(self.clock, kind, **fields)

    # time ---------------------------------------------------------------
    def tick(self) -> list[Datagram]:
        if self.clock >= self.max_ticks:
            raise OutOfTime(self.clock)
        delivered = self.topology.step()
        if self.monitor is not None and delivered:
            self.monitor.observe(delivered, self.clock)
        self._scheduled_defenses()
        self._environment()
        return delivered

    def advance(self, ticks: int) -> None:
        for _ in range(ticks):
            self.tick()

    def advance_to(self, tick: int) -> None:
        while self.clock < tick:
            self.tick()

    def _scheduled_defenses(self) -> None:
        p = self.policy
        if p.dark_region_monitor and self.baseline is not None and self.clock % p.scan_interval == 0:
            for host_id in sorted(self.hosts):
                defense.scan_dark(p, self.hosts[host_id], self.baseline, self.ledger, self.clock)
        if p.kernel_audit and self.clock % p.scan_interval == 0:
            for host_id in sorted(self.hosts):
                defense.audit_kernel_table(self.hosts[host_id], self.ledger, self.clock)

    def next_scan_tick(self) -> int | None:
        if not (self.policy.dark_region_monitor or self.policy.kernel_audit):
            return None
        k = self.policy.scan_interval
        return (self.clock // k + 1) * k

    def pending_environment(self) -> bool:
        return any(not s.delivered for s in self.shipments.values()) or bool(self.activities)

    def _environment(self) -> None:
        for name in sorted(self.shipments):
            s = self.shipments[name]
            if not s.delivered and s.arrival <= self.clock:
                s.delivered = True
                self.emit("ShipmentArrived", shipment=name, dest=s.dest, device=s.device.id)
                self.insert_usb(s.dest, s.device)
        while self.activities and self.activities[0].tick <= self.clock:
            self.run_activity(self.activities.pop(0))

    # traffic ------------------------------------------------------------
    def transmit(self, src: str, dst: str, proto: Proto, payload: bytes) -> Datagram | None:
        """Send and pump the fabric until the datagram lands; None if dropped."""
        dgram = Datagram(src, dst, proto, bytes(payload), self.clock)
        outcome = self.topology.send(self.policy.effective_vlan_policy(), dgram)
        if not outcome.queued:
            return None
        while self.clock < outcome.due:
            self.tick()
        return dgram

    def snmp_request(self, src: str, dst: str, request: hostmodel.SnmpRequest) -> hostmodel.SnmpResponse:
        """Round trip an SNMP request; agent errors are re-raised after the reply lands."""
        if self.transmit(src, dst, Proto.SNMP, request.encode()) is None:
            raise hostmodel.Unreachable(f"{dst} not reachable from {src}")
        host = self.host(dst)
        try:
            response = hostmodel.snmp_handle(host, request)
        except hostmodel.AuthFail:
            self.emit("SnmpAuthFail", host=dst, src=src, attempts=host.snmp.failed_attempts)
            self.transmit(dst, src, Proto.SNMP, defense.SNMP_AUTHFAIL)
            raise
        self.transmit(dst, src, Proto.SNMP, response.encode())
        return response

    # host operations routed through the defenses ------------------------
    def firmware_verifier(self, technique: str | None = None):
        if not self.policy.firmware_auth:
            return None

        def verify(host: Host, proposed: hostmodel.FirmwareImage) -> bool:
            return defense.verify_update(self.policy, host, proposed, self.ledger, self.clock, technique)

        return verify

    def write_firmware(self, host: Host, updates: dict[int, bytes], provenance: Provenance, *, technique: str, new_tag: bytes | None = None, new_version: str | None = None):
        """Every firmware write goes through here, so authentication cannot be skipped."""
        try:
            undo = hostmodel.write_firmware(
                host, updates, provenance, new_tag=new_tag, new_version=new_version,
                verify=self.firmware_verifier(technique),
            )
        except AuthRejected as exc:
            self.emit("FirmwareRejected", host=host.id, segments=sorted(updates), technique=technique)
            err = FirmwareAuthBlocked(str(exc))
            err.blocked_by = "firmware_auth"
            raise err from exc
        self.emit("FirmwareWrite", host=host.id, segments=sorted(updates), provenance=provenance.name, technique=technique)
        return undo

    def usb_gate(self, host: Host, device: UsbDevice) -> bool:
        if not self.policy.usb_gate:
            return True
        return defense.usb_gate(self.policy, host, device, self.ledger, self.clock)

    def insert_usb(self, host_id: str, device: UsbDevice) -> hostmodel.PortState:
        host = self.host(host_id)
        state = hostmodel.insert_usb(host, device, self.usb_gate)
        self.emit("UsbInsert", host=host_id, device=device.id, port=state.port, admitted=state.admitted, autorun=state.autorun_scheduled)
        for listener in list(self.usb_listeners):
            listener(host, device, state)
        return state

    def remove_usb(self, host_id: str, device: UsbDevice) -> hostmodel.PortState:
        host = self.host(host_id)
        port = next(i for i, d in enumerate(host.usb_ports) if d is device)
        state = hostmodel.remove_usb(host, port)
        self.emit("UsbRemove", host=host_id, device=device.id, port=port)
        return state

    def reboot(self, host_id: str) -> list:
        host = self.host(host_id)
        trace = hostmodel.boot(host)
        self.emit("Boot", host=host_id, trace=[e.value for e in trace])
        for listener in list(self.boot_listeners):
            listener(host, trace)
        return trace

    def reimage(self, host_id: str, **kwargs) -> None:
        hostmodel.reimage_os(self.host(host_id), **kwargs)
        self.emit("Reimage", host=host_id)

    # benign environment -------------------------------------------------
    def vendor_update(self, host_id: str, segments: list[int], version: str | None = None) -> None:
        host = self.host(host_id)
        rng = self.rng(f"vendor:{host_id}:{host.firmware.flash_count}")
        updates = {seg: rng.randbytes(len(host.firmware.segments.get(seg, b"")) or 256) for seg in segments}
        image = dict(host.firmware.segments)
        image.update(updates)
        tag = firmware_tag(self.policy.vendor_key, image)
        self.write_firmware(host, updates, Provenance.VENDOR_UPDATE, technique="vendor_update", new_tag=tag, new_version=version)

    def os_update(self, host_id: str) -> None:
        """Rewrite a few sectors inside the bootable partition."""
        host = self.host(host_id)
        idx = host.disk.bootable_index()
        part = host.disk.partition_table[idx]
        rng = self.rng(f"osupdate:{host_id}:{self.clock}")
        host.write_sectors(part.start_lba + 1, rng.randbytes(4 * 512), Provenance.VENDOR_UPDATE)
        self.emit("OsUpdate", host=host_id, lba=part.start_lba + 1, sectors=4)

    def run_activity(self, act: Activity) -> None:
        if act.verb == "vendor_update":
            segs = [int(s) for s in act.args.get("segments", "0").split(",")]
            try:
                self.vendor_update(act.target, segs, act.args.get("version"))
            except FirmwareAuthBlocked:
                pass
        elif act.verb == "os_update":
            self.os_update(act.target)
        elif act.verb == "reboot":
            self.reboot(act.target)
        elif act.verb == "reimage":
            self.reimage(act.target)
        elif act.verb == "usb":
            device = self.devices[act.args["device"]]
            state = self.insert_usb(act.target, device)
            if state.admitted:
                self.remove_usb(act.target, device)
        else:
            raise ValueError(f"unknown activity {act.verb!r}")

    def is_airgapped(self, host_id: str, c2: str) -> bool:
        return self.partition(host_id) != self.partition(c2)

    def hosts_of_kind(self, kind: HostKind) -> list[str]:
        return sorted(h for h, host in self.hosts.items() if host.kind is kind)
