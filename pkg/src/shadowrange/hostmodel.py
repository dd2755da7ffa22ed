"""Simulated hosts: boot path, firmware, kernel function table, SNMP agent,
a deliberately overflowable CLI, USB ports and a process table."""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Protocol

from . import cryptokit
from .disk import DiskImage, PartitionEntry, Provenance, SectorWrite
from .errors import (
    AuthFail,
    AuthRejected,
    AuthRequired,
    EmptyPort,
    MalformedPayload,
    NoBootablePartition,
    NoFreePort,
    NotFound,
    Unreachable,
)

HIDDEN_STORE_CAPACITY = 65536
KERNEL_BASE = 0xFFFFF80000000000
PROCESS_OBJECT_BASE = 0xFFFFA00000000000
OVERFLOW_MAGIC = b"\xeb\xba"

KERNEL_FUNCTIONS = (
    "PsLookupProcessByProcessId",
    "ZwQuerySystemInformation",
    "NtCreateFile",
    "NtReadFile",
    "NtWriteFile",
    "IoCreateDevice",
    "ObReferenceObjectByHandle",
    "KeStackAttachProcess",
    "MmGetSystemRoutineAddress",
    "ExAllocatePoolWithTag",
)

BOOT_PROCESSES = (
    (0, "Idle"),
    (4, "System"),
    (388, "smss.exe"),
    (500, "csrss.exe"),
    (612, "wininit.exe"),
    (700, "services.exe"),
    (720, "lsass.exe"),
)


class HostKind(str, Enum):
    WORKSTATION = "Workstation"
    FIREWALL = "Firewall"
    C2_SERVER = "C2Server"
    SANDBOX = "SandboxAnalyst"


class BootEvent(str, Enum):
    BIOS = "Bios"
    MBR_EXEC = "MbrExec"
    BOOTKIT_EXEC = "BootkitExec"
    PT_SCAN = "PtScan"
    VBR_EXEC = "VbrExec"
    BOOTLOADER_EXEC = "BootloaderExec"
    KERNEL_EXEC = "KernelExec"
    SELF_DESTRUCT = "SelfDestruct"


class CliOutcome(str, Enum):
    NORMAL_EXEC = "NormalExec"
    REJECTED = "Rejected"
    CRASH_DETECTED = "CrashDetected"
    CRASH = "Crash"
    CODE_EXEC = "CodeExec"


@dataclass
class FirmwareImage:
    segments: dict[int, bytes]
    version: str
    auth_tag: bytes = b"\x00" * 32
    flash_count: int = 0
    provenance: dict[int, Provenance] = field(default_factory=dict)

    def __post_init__(self):
        for seg in self.segments:
            self.provenance.setdefault(seg, Provenance.PRISTINE)

    def copy(self) -> "FirmwareImage":
        return FirmwareImage(dict(self.segments), self.version, self.auth_tag, self.flash_count, dict(self.provenance))


@dataclass(frozen=True)
class FirmwareWrite:
    segment: int
    before: bytes | None
    before_provenance: Provenance | None
    before_tag: bytes
    before_version: str


@dataclass
class KernelTable:
    entries: dict[int, int] = field(default_factory=dict)
    pristine: dict[int, int] | None = None


@dataclass(frozen=True)
class ProcessRecord:
    pid: int
    name: str
    object_address: int


@dataclass
class UsbDevice:
    id: str
    visible_files: dict[str, bytes] = field(default_factory=dict)
    hidden_store: bytearray = field(default_factory=bytearray)
    autorun: str | None = None
    device_credential: bytes = b"\x00" * 32

    def listing(self) -> list[str]:
        """Ordinary file enumeration; the hidden store never shows up here."""
        return sorted(self.visible_files)


@dataclass
class SnmpAgent:
    enabled: bool = True
    community: str = "public"
    auth_required: bool = True
    failed_attempts: int = 0
    model: str = "generic"


@dataclass(frozen=True)
class SnmpRequest:
    community: str
    verb: str  # "Info" or "SetAuthMode"
    arg: str = ""

    def encode(self) -> bytes:
        return f"{self.community}\x00{self.verb}\x00{self.arg}".encode()

    @classmethod
    def decode(cls, raw: bytes) -> "SnmpRequest":
        community, verb, arg = raw.decode().split("\x00")
        return cls(community, verb, arg)


@dataclass(frozen=True)
class SnmpResponse:
    value: str

    def encode(self) -> bytes:
        return self.value.encode()


@dataclass
class ParserHardening:
    bounds_checking: bool = False
    stack_canary: bool = False
    aslr: bool = False
    buffer_capacity: int = 128
    aslr_entropy_bits: int = 8

    @property
    def any(self) -> bool:
        return self.bounds_checking or self.stack_canary or self.aslr


@dataclass(frozen=True)
class Session:
    transport: str = "SshLike"  # or "TelnetLike"
    credentials: tuple[str, str] | None = None


class BootkitHandler(Protocol):
    def startup(self, host: "Host") -> bool: ...

    def after_kernel(self, host: "Host") -> None: ...


@dataclass(frozen=True)
class Census:
    disk: str
    kernel: tuple
    firmware: tuple
    processes: tuple


@dataclass
class Host:
    id: str
    kind: HostKind
    disk: DiskImage
    firmware: FirmwareImage
    kernel_table: KernelTable = field(default_factory=KernelTable)
    processes: dict[int, ProcessRecord] = field(default_factory=dict)
    usb_ports: list[UsbDevice | None] = field(default_factory=lambda: [None, None])
    snmp: SnmpAgent = field(default_factory=lambda: SnmpAgent(enabled=False))
    ipv4_enabled: bool = True
    hardening: ParserHardening = field(default_factory=ParserHardening)
    session_budget: int | None = None
    booted: bool = False
    admin_credentials: tuple[str, str] = ("admin", "admin")
    files: dict[str, bytes] = field(default_factory=dict)
    drivers: set[str] = field(default_factory=set)
    tags: tuple[str, ...] = ()
    credentials: list[bytes] = field(default_factory=list)
    autorun_allowed: bool = True
    seed: int = 0
    bootkit_handler: BootkitHandler | None = None
    aslr_slide: int = 0
    boots: int = 0

    def __post_init__(self):
        if (self.session_budget is not None) != (self.kind is HostKind.SANDBOX):
            raise ValueError("session_budget is required for, and only for, sandbox hosts")
        self._pristine_files = dict(self.files)
        self._rng = random.Random(f"host:{self.id}:{self.seed}")
        self._next_pid = 1000

    # bookkeeping ------------------------------------------------------
    @property
    def bootable_object_id(self) -> bytes:
        idx = self.disk.bootable_index()
        if idx is None:
            raise NoBootablePartition(self.id)
        return self.disk.ntfs_object_id[idx]

    def census(self) -> Census:
        h = hashlib.sha256(self.disk.data)
        h.update(self.disk.provenance)
        for name in sorted(self.files):
            h.update(name.encode() + b"\x00" + hashlib.sha256(self.files[name]).digest())
        kernel = (tuple(sorted(self.kernel_table.entries.items())), tuple(sorted(self.drivers)))
        firmware = tuple(
            (seg, hashlib.sha256(blob).hexdigest(), int(self.firmware.provenance[seg]))
            for seg, blob in sorted(self.firmware.segments.items())
        )
        procs = tuple(sorted((p.pid, p.name) for p in self.processes.values()))
        return Census(h.hexdigest(), kernel, firmware, procs)

    def spawn(self, name: str) -> ProcessRecord:
        pid = self._next_pid
        self._next_pid += 4
        rec = ProcessRecord(pid, name, PROCESS_OBJECT_BASE + (self.aslr_slide << 24) + pid * 0x80)
        self.processes[pid] = rec
        return rec

    def kill(self, pid: int) -> None:
        self.processes.pop(pid, None)

    def write_sectors(self, lba: int, payload: bytes, provenance: Provenance, offset: int = 0) -> SectorWrite:
        return self.disk.write(lba, payload, provenance, offset)

    def shutdown(self) -> None:
        """Power off: everything in memory is lost."""
        self.processes.clear()
        self.kernel_table.entries.clear()
        self.booted = False


def _kernel_entries() -> dict[int, int]:
    return {
        cryptokit.fn_name_hash(name): KERNEL_BASE + 0x1000 * (i + 1)
        for i, name in enumerate(KERNEL_FUNCTIONS)
    }


def boot(host: Host) -> list[BootEvent]:
    if host.disk.bootable_index() is None:
        raise NoBootablePartition(f"{host.id}: no partition carries the boot flag")
    host.shutdown()
    trace = [BootEvent.BIOS, BootEvent.MBR_EXEC]
    handler = None
    if host.disk.provenance[0] == Provenance.ATTACKER_WRITE:
        trace.append(BootEvent.BOOTKIT_EXEC)
        handler = host.bootkit_handler
        if handler is not None and not handler.startup(host):
            trace.append(BootEvent.SELF_DESTRUCT)
            return trace
    trace += [BootEvent.PT_SCAN, BootEvent.VBR_EXEC, BootEvent.BOOTLOADER_EXEC, BootEvent.KERNEL_EXEC]
    if host.kernel_table.pristine is None:
        host.kernel_table.pristine = _kernel_entries()
    host.kernel_table.entries = dict(host.kernel_table.pristine)
    host.aslr_slide = host._rng.getrandbits(host.hardening.aslr_entropy_bits) if host.hardening.aslr else 0
    host.processes = {
        pid: ProcessRecord(pid, name, PROCESS_OBJECT_BASE + (host.aslr_slide << 24) + pid * 0x80)
        for pid, name in BOOT_PROCESSES
    }
    host.booted = True
    host.boots += 1
    if handler is not None:
        handler.after_kernel(host)
    return trace


def dark_regions(disk: DiskImage):
    return disk.dark_regions()


def snmp_handle(host: Host, request: SnmpRequest) -> SnmpResponse:
    agent = host.snmp
    if not agent.enabled:
        raise Unreachable(f"{host.id}: SNMP disabled")
    if request.community != agent.community:
        agent.failed_attempts += 1
        raise AuthFail(f"{host.id}: bad community string")
    if request.verb == "Info":
        return SnmpResponse(f"{agent.model} {host.firmware.version}")
    if request.verb == "SetAuthMode":
        if request.arg not in ("pass-disabled", "pass-enabled"):
            raise ValueError(f"unknown auth mode {request.arg!r}")
        agent.auth_required = request.arg == "pass-enabled"
        return SnmpResponse(f"auth-mode {request.arg}")
    raise ValueError(f"unknown SNMP verb {request.verb!r}")


@dataclass(frozen=True)
class OverflowPayload:
    guess: int
    target_version: str
    shellcode: bytes = b""


def build_overflow(capacity: int, target_version: str, guess: int = 0, shellcode: bytes = b"") -> bytes:
    version = target_version.encode()
    return b"A" * capacity + OVERFLOW_MAGIC + bytes([guess & 0xFF, len(version)]) + version + shellcode


def parse_overflow(data: bytes, capacity: int) -> OverflowPayload:
    tail = data[capacity:]
    if len(tail) < 4 or tail[:2] != OVERFLOW_MAGIC:
        raise MalformedPayload("overflow tail lacks payload header")
    vlen = tail[3]
    if len(tail) < 4 + vlen:
        raise MalformedPayload("truncated target version")
    try:
        version = tail[4 : 4 + vlen].decode()
    except UnicodeDecodeError:
        raise MalformedPayload("target version is not text") from None
    return OverflowPayload(tail[2], version, bytes(tail[4 + vlen :]))


def cli_handle(host: Host, session: Session, input_bytes: bytes, on_canary: Callable[[Host], None] | None = None) -> CliOutcome:
    if host.kind is HostKind.FIREWALL and host.snmp.auth_required:
        if session.credentials != host.admin_credentials:
            raise AuthRequired(f"{host.id}: CLI requires valid credentials")
    cfg = host.hardening
    if len(input_bytes) <= cfg.buffer_capacity:
        return CliOutcome.NORMAL_EXEC
    if cfg.bounds_checking:
        return CliOutcome.REJECTED
    if cfg.stack_canary:
        if on_canary is not None:
            on_canary(host)
        return CliOutcome.CRASH_DETECTED
    payload = parse_overflow(input_bytes, cfg.buffer_capacity)
    if cfg.aslr and payload.guess != host.aslr_slide:
        return CliOutcome.CRASH
    if payload.target_version != host.firmware.version:
        return CliOutcome.CRASH
    return CliOutcome.CODE_EXEC


FirmwareVerifier = Callable[[Host, FirmwareImage], bool]


def write_firmware(
    host: Host,
    updates: dict[int, bytes],
    provenance: Provenance,
    *,
    new_tag: bytes | None = None,
    new_version: str | None = None,
    verify: FirmwareVerifier | None = None,
) -> list[FirmwareWrite]:
    """The single firmware write path. ``verify`` sees the post-write image."""
    fw = host.firmware
    proposed = fw.copy()
    proposed.segments.update(updates)
    if new_tag is not None:
        proposed.auth_tag = new_tag
    if verify is not None and not verify(host, proposed):
        raise AuthRejected(f"{host.id}: firmware update failed authentication")
    undo = [
        FirmwareWrite(seg, fw.segments.get(seg), fw.provenance.get(seg), fw.auth_tag, fw.version)
        for seg in sorted(updates)
    ]
    for seg, blob in sorted(updates.items()):
        fw.segments[seg] = blob
        fw.provenance[seg] = provenance
    fw.auth_tag = proposed.auth_tag
    if new_version is not None:
        fw.version = new_version
    fw.flash_count += 1
    return undo


def undo_firmware(host: Host, record: FirmwareWrite) -> None:
    fw = host.firmware
    if record.before is None:
        fw.segments.pop(record.segment, None)
        fw.provenance.pop(record.segment, None)
    else:
        fw.segments[record.segment] = record.before
        fw.provenance[record.segment] = record.before_provenance
    fw.auth_tag = record.before_tag
    fw.version = record.before_version


def apply_vendor_update(
    host: Host,
    updates: dict[int, bytes],
    new_tag: bytes,
    *,
    new_version: str | None = None,
    verify: FirmwareVerifier | None = None,
) -> list[FirmwareWrite]:
    """Replace only the listed segments; anything else (implants included) stays."""
    return write_firmware(
        host, updates, Provenance.VENDOR_UPDATE, new_tag=new_tag, new_version=new_version, verify=verify
    )


def reimage_os(host: Host, *, reset_mbr: bool = True, new_object_ids: bool = True) -> Host:
    host.disk.restore_partitions()
    if reset_mbr:
        host.disk.reset_boot_code()
    if new_object_ids:
        for idx in host.disk.ntfs_object_id:
            host.disk.ntfs_object_id[idx] = host._rng.randbytes(16)
    host.files = dict(host._pristine_files)
    host.drivers.clear()
    host.shutdown()
    return host


@dataclass(frozen=True)
class PortState:
    port: int
    device_id: str | None
    admitted: bool = True
    autorun_scheduled: bool = False


UsbGate = Callable[[Host, UsbDevice], bool]


def insert_usb(host: Host, device: UsbDevice, gate: UsbGate | None = None) -> PortState:
    try:
        port = host.usb_ports.index(None)
    except ValueError:
        raise NoFreePort(host.id) from None
    if gate is not None and not gate(host, device):
        return PortState(port, device.id, admitted=False)
    host.usb_ports[port] = device
    scheduled = device.autorun is not None and host.autorun_allowed and host.booted
    return PortState(port, device.id, True, scheduled)


def remove_usb(host: Host, port: int) -> PortState:
    if not 0 <= port < len(host.usb_ports) or host.usb_ports[port] is None:
        raise EmptyPort(f"{host.id}: port {port} is empty")
    host.usb_ports[port] = None
    return PortState(port, None)


def lookup_process_by_id(host: Host, pid: int) -> ProcessRecord:
    if not host.booted or pid not in host.processes:
        raise NotFound(f"{host.id}: no process {pid}")
    return host.processes[pid]


def default_firmware(version: str, seed: int = 0, segments: int = 3) -> FirmwareImage:
    rng = random.Random(f"fw:{version}:{seed}")
    return FirmwareImage({i: rng.randbytes(256) for i in range(segments)}, version)


def default_disk(sector_count: int = 4096, rng: random.Random | None = None) -> DiskImage:
    """Two partitions leaving an MBR gap, an inter-partition gap and a tail gap."""
    p0 = PartitionEntry(128, 2944, bootable=True)
    p1 = PartitionEntry(3200, 800)
    if sector_count < p1.end:
        raise ValueError("default layout needs at least 4000 sectors")
    return DiskImage.create(sector_count, [p0, p1], rng=rng)
