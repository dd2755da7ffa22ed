"""Countermeasures as independent toggles.

Every detector writes into a single append-only :class:`DetectionLedger`, so
canary crashes raised by the host CLI end up next to network and disk alerts.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable

from . import cryptokit
from .disk import DarkRegion
from .errors import NoBaseline
from .hostmodel import FirmwareImage, Host, ParserHardening, UsbDevice
from .netsim import Datagram, Proto, VlanPolicy

HANDSHAKE_SIZE = 21
HANDSHAKE_TAG = 0x51
SNMP_AUTHFAIL = b"ERR authFail"

# The six toggles the blocking matrix is built from.
TOGGLES = (
    "usb_gate",
    "parser",
    "firmware_auth",
    "dark_region_monitor",
    "traffic_monitor",
    "vlan_segmentation",
)


class Detector(str, Enum):
    USB_GATE = "UsbGate"
    TRAFFIC_MONITOR = "TrafficMonitor"
    DARK_SCAN = "DarkScan"
    FIRMWARE_AUTH = "FirmwareAuth"
    CANARY = "Canary"
    SNMP_BRUTEFORCE = "SnmpBruteforce"
    KERNEL_AUDIT = "KernelAudit"


# detector -> (kill-chain stage implicated, default technique)
IMPLICATES = {
    Detector.USB_GATE: ("Validated", "fanny_delivery"),
    Detector.CANARY: ("Exploited", "epicbanana"),
    Detector.SNMP_BRUTEFORCE: ("Exploited", "snmp_bruteforce"),
    Detector.TRAFFIC_MONITOR: ("Implanted", "banalride"),
    Detector.FIRMWARE_AUTH: ("Persistent", "firmware_persistence"),
    Detector.DARK_SCAN: ("Persistent", "grayfish_bootkit"),
    Detector.KERNEL_AUDIT: ("Persistent", "rootkit"),
}


@dataclass(frozen=True)
class DetectionEvent:
    time: int
    detector: Detector
    host: str
    details: str
    implicated_stage: str | None = None
    technique: str | None = None
    seq: int = 0


class DetectionLedger:
    def __init__(self, sink: Callable[[DetectionEvent], None] | None = None):
        self.events: list[DetectionEvent] = []
        self._sink = sink

    def record(self, time: int, detector: Detector, host: str, details: str, technique: str | None = None) -> DetectionEvent:
        stage, default_technique = IMPLICATES[detector]
        event = DetectionEvent(time, detector, host, details, stage, technique or default_technique, len(self.events))
        self.events.append(event)
        if self._sink is not None:
            self._sink(event)
        return event


@dataclass
class DefensePolicy:
    usb_gate: bool = False
    usb_safelist: dict[str, bytes] = field(default_factory=dict)  # device id -> sha256(credential)
    usb_two_factor: bool = False
    vlan_segmentation: bool = False
    vlan_policy: VlanPolicy = field(default_factory=VlanPolicy)
    parser: bool = False
    hardening: ParserHardening = field(
        default_factory=lambda: ParserHardening(bounds_checking=True, stack_canary=True, aslr=True)
    )
    firmware_auth: bool = False
    vendor_key: bytes = b""
    dark_region_monitor: bool = False
    scan_interval: int = 10
    traffic_monitor: bool = False
    snmp_bruteforce_threshold: int = 3
    kernel_audit: bool = False

    def effective_vlan_policy(self) -> VlanPolicy | None:
        return self.vlan_policy if self.vlan_segmentation else None

    def host_hardening(self, capacity: int = 128, entropy_bits: int = 8) -> ParserHardening:
        if not self.parser:
            return ParserHardening(buffer_capacity=capacity, aslr_entropy_bits=entropy_bits)
        return replace(self.hardening, buffer_capacity=capacity, aslr_entropy_bits=entropy_bits)

    def with_toggles(self, **toggles: bool) -> "DefensePolicy":
        unknown = set(toggles) - set(TOGGLES) - {"kernel_audit", "usb_two_factor"}
        if unknown:
            raise ValueError(f"unknown defense toggles: {sorted(unknown)}")
        return replace(self, **toggles)

    def only(self, *names: str) -> "DefensePolicy":
        return self.with_toggles(**{t: t in names for t in TOGGLES})

    @property
    def active(self) -> tuple[str, ...]:
        return tuple(t for t in TOGGLES if getattr(self, t))


def credential_digest(credential: bytes) -> bytes:
    return hashlib.sha256(credential).digest()


def usb_gate(policy: DefensePolicy, host: Host, device: UsbDevice, ledger: DetectionLedger | None = None, time: int = 0) -> bool:
    """True admits the device. Blocks are logged as UsbGate detections."""
    record = policy.usb_safelist.get(device.id)
    admitted = record is not None
    reason = "device not on safelist"
    if admitted and policy.usb_two_factor and credential_digest(device.device_credential) != record:
        admitted = False
        reason = "device credential mismatch"
    if not admitted and ledger is not None:
        ledger.record(time, Detector.USB_GATE, host.id, f"{device.id}: {reason}")
    return admitted


@dataclass
class Baseline:
    digests: dict[str, dict[str, bytes]]
    regions: dict[str, list[DarkRegion]]
    taken_at: int


def _region_label(region: DarkRegion | None) -> str:
    if region is None:
        return "sector0"
    return f"{region.kind.value}@{region.start_lba}+{region.length}"


def _region_digest(host: Host, region: DarkRegion | None) -> bytes:
    if region is None:
        return hashlib.sha256(host.disk.read(0)).digest()
    return hashlib.sha256(host.disk.read(region.start_lba, region.length)).digest()


def take_baseline(hosts: Iterable[Host], time: int = 0) -> Baseline:
    digests, regions = {}, {}
    for host in hosts:
        if any(p != 0 for p in host.disk.provenance):
            raise ValueError(f"{host.id}: baseline must be taken on a pristine disk")
        regs = host.disk.dark_regions()
        regions[host.id] = regs
        digests[host.id] = {_region_label(r): _region_digest(host, r) for r in [None, *regs]}
    return Baseline(digests, regions, time)


def scan_dark(policy: DefensePolicy, host: Host, baseline: Baseline | None, ledger: DetectionLedger | None = None, time: int = 0) -> list[DetectionEvent]:
    if baseline is None or host.id not in baseline.digests:
        raise NoBaseline(host.id)
    ledger = ledger if ledger is not None else DetectionLedger()
    events = []
    expected = baseline.digests[host.id]
    for region in [None, *baseline.regions[host.id]]:
        label = _region_label(region)
        if _region_digest(host, region) != expected[label]:
            events.append(ledger.record(time, Detector.DARK_SCAN, host.id, f"{label} changed"))
    return events


def verify_update(policy: DefensePolicy, host: Host, proposed: FirmwareImage, ledger: DetectionLedger | None = None, time: int = 0, technique: str | None = None) -> bool:
    ok = cryptokit.firmware_verify(policy.vendor_key, proposed.segments, proposed.auth_tag)
    if not ok and ledger is not None:
        ledger.record(time, Detector.FIRMWARE_AUTH, host.id, "firmware write rejected: tag does not verify", technique)
    return ok


def is_handshake(d: Datagram) -> bool:
    return d.proto is Proto.UDP and d.size == HANDSHAKE_SIZE and d.payload[0] == HANDSHAKE_TAG


class TrafficMonitor:
    """Flags the 21-byte handshake shape and SNMP community brute forcing.

    Sealed traffic is deliberately not inspected: it has no stable shape.
    """

    def __init__(self, policy: DefensePolicy, ledger: DetectionLedger | None = None):
        self.policy = policy
        self.ledger = ledger if ledger is not None else DetectionLedger()
        self._authfails: dict[str, int] = {}
        self._flagged: set[str] = set()

    def observe(self, delivered: Iterable[Datagram], time: int | None = None) -> list[DetectionEvent]:
        events = []
        for d in delivered:
            t = d.sent_at + 1 if time is None else time
            if is_handshake(d):
                events.append(
                    self.ledger.record(t, Detector.TRAFFIC_MONITOR, d.dst, f"HandshakeSignature {d.src}->{d.dst}")
                )
            elif d.proto is Proto.SNMP and d.payload.startswith(SNMP_AUTHFAIL):
                n = self._authfails.get(d.src, 0) + 1
                self._authfails[d.src] = n
                if n >= self.policy.snmp_bruteforce_threshold and d.src not in self._flagged:
                    self._flagged.add(d.src)
                    events.append(
                        self.ledger.record(t, Detector.SNMP_BRUTEFORCE, d.src, f"{n} failed community strings")
                    )
        return events


def monitor_traffic(policy: DefensePolicy, delivered: Iterable[Datagram], ledger: DetectionLedger | None = None) -> list[DetectionEvent]:
    return TrafficMonitor(policy, ledger).observe(delivered)


@dataclass(frozen=True)
class DivergentEntry:
    name_hash: int
    pristine_address: int
    current_address: int


def audit_kernel_table(host: Host, ledger: DetectionLedger | None = None, time: int = 0) -> list[DivergentEntry]:
    table = host.kernel_table
    if not host.booted or table.pristine is None:
        return []
    found = [
        DivergentEntry(h, addr, table.entries.get(h, 0))
        for h, addr in sorted(table.pristine.items())
        if table.entries.get(h) != addr
    ]
    if ledger is not None:
        for entry in found:
            ledger.record(time, Detector.KERNEL_AUDIT, host.id, f"entry {entry.name_hash:#010x} redirected")
    return found
