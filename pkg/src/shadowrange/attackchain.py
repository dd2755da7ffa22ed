"""The attacker as an explicit kill-chain state machine.

A :class:`Campaign` drives every attacker operation against a :class:`World`.
Each operation logs a ``StageAttempt`` and ends in ``StageAchieved``,
``StageBlocked`` (a defense stopped it) or ``StageFailed``. Every change an
implant makes to a host is journaled so :meth:`Campaign.self_destruct` can
put the host back exactly as it was.
"""

from __future__ import annotations

import hashlib
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Iterator

from . import cryptokit, hostmodel, kernels
from .cryptokit import ChannelState, DhGroup, DEFAULT_GROUP, open_sealed, seal, sha256
from .defense import HANDSHAKE_SIZE, HANDSHAKE_TAG, Detector
from .disk import Provenance, SectorWrite
from .errors import (
    AuthFail,
    Blocked,
    ChannelClosed,
    HiddenStoreFull,
    MalformedHandshake,
    NoAccessVector,
    NoChannel,
    NoDarkSpace,
    NoShipment,
    NotFound,
    PreconditionFailed,
    ShadowRangeError,
    StageNotSucceeded,
    StageViolation,
    TagMismatch,
    TransportUnreachable,
    Unreachable,
    UnknownFunction,
)
from .hostmodel import (
    HIDDEN_STORE_CAPACITY,
    CliOutcome,
    FirmwareWrite,
    Host,
    HostKind,
    Session,
    SnmpRequest,
    UsbDevice,
)
from .netsim import DropReason, Proto
from .world import World

log = logging.getLogger(__name__)

BOOTKIT_BODY_SECTORS = 64
EXFIL_CHUNK = 4096
FANNY_AUTORUN = "fanny"
JETPLOW_MAGIC = b"JETPLOW\x00"
FLASHER_MAGIC = b"NLSFLASH"
BOOTKIT_STUB_MAGIC = b"GFLD"
BOOTKIT_BODY_MAGIC = b"GRAYFISH"
VFS_PROBE = "probe"
VFS_PROBE_DATA = b"\x00startup-probe\x00"
SCREENSHOT_SIZE = 4096


class Stage(str, Enum):
    VALIDATED = "Validated"
    EXPLOITED = "Exploited"
    IMPLANTED = "Implanted"
    PERSISTENT = "Persistent"
    COLLECTED = "Collected"
    EXFILTRATED = "Exfiltrated"


STAGES = tuple(Stage)
PREREQUISITE = {
    Stage.EXPLOITED: Stage.VALIDATED,
    Stage.IMPLANTED: Stage.EXPLOITED,
    Stage.PERSISTENT: Stage.IMPLANTED,
    Stage.COLLECTED: Stage.IMPLANTED,
    Stage.EXFILTRATED: Stage.IMPLANTED,
}


class ImplantKind(str, Enum):
    VALIDATOR = "Validator"
    LOADER = "Loader"
    BANAGLEE = "Banaglee"
    JETPLOW = "Jetplow"
    EQUATION_DRUG = "EquationDrug"
    GRAYFISH = "GrayFish"
    FANNY = "Fanny"


PLATFORMS = (ImplantKind.EQUATION_DRUG, ImplantKind.GRAYFISH)
DEFAULT_PLUGINS = ((1, 1), (2, 1))  # file retrieval, screenshot capture


# -- journaled host changes -------------------------------------------------

@dataclass(frozen=True)
class FileWrite:
    name: str
    before: bytes | None


@dataclass(frozen=True)
class ProcessSpawn:
    pid: int


@dataclass(frozen=True)
class KernelPatch:
    name_hash: int
    before: int


@dataclass(frozen=True)
class DriverLoad:
    name: str


Artifact = SectorWrite | FirmwareWrite | FileWrite | ProcessSpawn | KernelPatch | DriverLoad


def revert(host: Host, artifact: Artifact) -> None:
    if isinstance(artifact, SectorWrite):
        host.disk.undo(artifact)
    elif isinstance(artifact, FirmwareWrite):
        hostmodel.undo_firmware(host, artifact)
    elif isinstance(artifact, FileWrite):
        if artifact.before is None:
            host.files.pop(artifact.name, None)
        else:
            host.files[artifact.name] = artifact.before
    elif isinstance(artifact, ProcessSpawn):
        host.kill(artifact.pid)
    elif isinstance(artifact, KernelPatch):
        table = host.kernel_table
        if table.entries:
            original = table.pristine.get(artifact.name_hash, artifact.before) if table.pristine else artifact.before
            table.entries[artifact.name_hash] = original
    elif isinstance(artifact, DriverLoad):
        host.drivers.discard(artifact.name)
    else:  # pragma: no cover - exhaustive
        raise TypeError(artifact)


# -- encrypted virtual file system -----------------------------------------

class Vfs:
    """Attacker file store sealed under the GrayFish key of an NTFS object id."""

    def __init__(self, key_source: bytes, *, salted: bool = False):
        self.key_source = bytes(key_source)
        self.salted = salted
        self.entries: dict[str, tuple[bytes, bytes]] = {}
        self._key = cryptokit.grayfish_key(self.key_source, salted=salted)

    @staticmethod
    def _crypt(key: bytes, name: str, data: bytes) -> bytes:
        return kernels.keystream_xor(key, sha256(name.encode())[:8], 0, data)

    @staticmethod
    def _tag(key: bytes, name: str, ciphertext: bytes) -> bytes:
        return sha256(key + name.encode() + b"\x00" + ciphertext)[: cryptokit.TAG_SIZE]

    def put(self, name: str, plaintext: bytes) -> None:
        ct = self._crypt(self._key, name, plaintext)
        self.entries[name] = (ct, self._tag(self._key, name, ct))

    def get(self, name: str, object_id: bytes) -> bytes:
        if name not in self.entries:
            raise NotFound(f"vfs entry {name!r}")
        key = cryptokit.grayfish_key(object_id, salted=self.salted)
        ct, tag = self.entries[name]
        if self._tag(key, name, ct) != tag:
            raise TagMismatch(f"vfs entry {name!r} does not open under this object id")
        return self._crypt(key, name, ct)

    def dump(self) -> list[tuple[str, bytes]]:
        return [(n, self.get(n, self.key_source)) for n in sorted(self.entries)]

    def erase(self) -> None:
        self.entries.clear()


def vfs_put(vfs: Vfs, name: str, plaintext: bytes) -> None:
    vfs.put(name, plaintext)


def vfs_get(vfs: Vfs, name: str, object_id: bytes) -> bytes:
    return vfs.get(name, object_id)


# -- wire formats ------------------------------------------------------------

def encode_handshake(nonce: bytes, public: int) -> bytes:
    if len(nonce) != 4:
        raise ValueError("handshake nonce is 4 bytes")
    return bytes([HANDSHAKE_TAG]) + nonce + public.to_bytes(cryptokit.DH_PUBLIC_SIZE, "big")


def parse_handshake(data: bytes) -> tuple[bytes, int]:
    if len(data) != HANDSHAKE_SIZE or data[0] != HANDSHAKE_TAG:
        raise MalformedHandshake(f"expected {HANDSHAKE_SIZE} bytes tagged {HANDSHAKE_TAG:#x}, got {len(data)}")
    return bytes(data[1:5]), int.from_bytes(data[5:], "big")


STORE_MAGIC = b"FNY1"
RECORD_HEADER = 5


class Rec(IntEnum):
    COMMAND = 1
    CREDENTIAL = 2
    NETMAP = 3
    HOSTINFO = 4
    RESULT = 5


def encode_records(records: list[tuple[int, bytes]]) -> bytes:
    out = bytearray(STORE_MAGIC)
    for kind, body in records:
        out.append(int(kind))
        out += len(body).to_bytes(4, "big")
        out += body
    return bytes(out)


def parse_hidden_store(data: bytes) -> list[tuple[Rec, bytes]]:
    if not data:
        return []
    if data[:4] != STORE_MAGIC:
        raise ValueError("hidden store lacks FANNY header")
    out, pos = [], 4
    while pos < len(data):
        kind, n = data[pos], int.from_bytes(data[pos + 1 : pos + 5], "big")
        out.append((Rec(kind), bytes(data[pos + 5 : pos + 5 + n])))
        pos += RECORD_HEADER + n
    return out


def fanny_build_usb(device: UsbDevice, command_blocks: list[bytes]) -> UsbDevice:
    store = encode_records([(Rec.COMMAND, bytes(b)) for b in command_blocks])
    if len(store) > HIDDEN_STORE_CAPACITY:
        raise HiddenStoreFull(f"{len(store)} bytes exceed {HIDDEN_STORE_CAPACITY}")
    device.hidden_store = bytearray(store)
    device.autorun = FANNY_AUTORUN
    return device


# -- state -------------------------------------------------------------------

@dataclass
class Implant:
    kind: ImplantKind
    host: str
    memory_resident: bool = False
    plugins: list[tuple[int, int]] = field(default_factory=list)
    host_artifacts: list = field(default_factory=list)
    pid: int | None = None
    active: bool = True
    vfs: Vfs | None = None
    hooks: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind is ImplantKind.BANAGLEE and not self.memory_resident:
            raise ValueError("Banaglee lives in memory only")

    def add_plugin(self, plugin_id: int, version: int) -> None:
        if (plugin_id, version) in self.plugins:
            raise ValueError(f"plugin {plugin_id} v{version} already loaded")
        self.plugins.append((plugin_id, version))


@dataclass
class AttackState:
    target: str
    stages: list[Stage] = field(default_factory=list)
    interest_score: int = 0
    active_implants: list[Implant] = field(default_factory=list)
    access: list[str] = field(default_factory=list)
    halted: bool = False

    def has(self, stage: Stage) -> bool:
        return stage in self.stages

    def achieve(self, stage: Stage) -> bool:
        """Add ``stage``; returns False when it was already held."""
        if stage in self.stages:
            return False
        need = PREREQUISITE.get(stage)
        if need is not None and need not in self.stages:
            raise StageViolation(f"{self.target}: {stage.value} requires {need.value}")
        self.stages.append(stage)
        return True

    def implant(self, *kinds: ImplantKind) -> Implant | None:
        for imp in reversed(self.active_implants):
            if imp.kind in kinds and imp.active:
                return imp
        return None


@dataclass(frozen=True)
class ValidationOutcome:
    validated: bool
    score: int
    threshold: int


@dataclass(frozen=True)
class ExploitOutcome:
    success: bool
    detail: str
    cli: CliOutcome | None = None


@dataclass(frozen=True)
class BootkitRecord:
    stub_lba: int
    body_lba: int
    body_sectors: int


@dataclass(frozen=True)
class HookRecord:
    function: str
    name_hash: int
    original: int
    new_address: int
    process_object: int
    buffer: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class FannyActions:
    host: str
    map_entries: tuple[str, ...]
    stored: tuple[tuple[str, int], ...]
    commands_run: int
    capacity_exhausted: bool


@dataclass(frozen=True)
class ExfilReport:
    bytes: int
    datagrams: int
    plaintext_bytes: int


@dataclass(frozen=True)
class ProbeOutcome:
    executed: bool
    tick: int


@dataclass
class StagePayload:
    index: int
    blob: bytes
    delivered: bool = False

    def __post_init__(self):
        if self.index < 1:
            raise ValueError("stage payload index starts at 1")


@dataclass
class StagedDelivery:
    target: str
    src: str
    succeeded: set[int] = field(default_factory=set)
    failed: bool = False


@dataclass(frozen=True)
class DeliveryEvent:
    shipment: str
    dest: str
    device: str
    arrival: int


def fanny_greedy_fill(candidates: list[tuple[Rec, bytes]], room: int) -> tuple[list[tuple[Rec, bytes]], bool]:
    """Take records in order; the first that does not fit is truncated and filling stops."""
    taken = []
    for kind, body in candidates:
        need = RECORD_HEADER + len(body)
        if need <= room:
            taken.append((kind, body))
            room -= need
            continue
        if room > RECORD_HEADER:
            taken.append((kind, body[: room - RECORD_HEADER]))
        return taken, True
    return taken, False


class Campaign:
    def __init__(
        self,
        world: World,
        c2: str,
        *,
        threshold: int = 1,
        weights: dict[str, int] | None = None,
        volume_unit: int = 65536,
        salted_kdf: bool = False,
        group: DhGroup = DEFAULT_GROUP,
        hook_function: str = "ZwQuerySystemInformation",
        hardcoded_pid: int = 4,
    ):
        world.host(c2)
        self.world = world
        self.c2 = c2
        self.threshold = threshold
        self.weights = dict(weights or {})
        self.volume_unit = volume_unit
        self.salted_kdf = salted_kdf
        self.group = group
        self.hook_function = hook_function
        self.hardcoded_pid = hardcoded_pid
        self.rng = world.rng("attacker")
        self._responder_rng = world.rng("responder")
        self.master = world.rng("attacker-master").randbytes(32)
        self.states: dict[str, AttackState] = {}
        self.channels: dict[str, tuple[ChannelState, ChannelState]] = {}
        self.pre_census: dict[str, hostmodel.Census] = {}
        self.staged: dict[str, StagedDelivery] = {}
        self.loot: dict[str, list[tuple[str, bytes]]] = {}
        self.fanny_origins: dict[str, list[str]] = {}
        self.exfiltrated = 0
        world.usb_listeners.append(self._on_usb)
        world.boot_listeners.append(self._on_boot)

    # -- bookkeeping -----------------------------------------------------
    def state(self, target: str) -> AttackState:
        if target not in self.states:
            self.world.host(target)
            self.states[target] = AttackState(target)
        return self.states[target]

    def _emit(self, kind: str, **fields):
        return self.world.emit(kind, actor="attacker", **fields)

    def _achieve(self, target: str, stage: Stage, technique: str) -> None:
        if self.state(target).achieve(stage):
            self._emit("StageAchieved", target=target, stage=stage, technique=technique)

    def _outcome(self, kind: str, target: str, stage: Stage, technique: str, **extra) -> None:
        self._emit(kind, target=target, stage=stage, technique=technique, **extra)

    @contextmanager
    def _attempt(self, target: str, stage: Stage, technique: str) -> Iterator[None]:
        self._emit("StageAttempt", target=target, stage=stage, technique=technique)
        try:
            yield
        except ShadowRangeError as exc:
            if exc.blocked_by:
                self._outcome("StageBlocked", target, stage, technique, by=exc.blocked_by, reason=type(exc).__name__)
            else:
                self._outcome("StageFailed", target, stage, technique, reason=type(exc).__name__)
            raise

    def _journal(self, implant: Implant, artifact) -> None:
        implant.host_artifacts.append(artifact)

    def _write_file(self, host: Host, implant: Implant, name: str, data: bytes) -> None:
        self._journal(implant, FileWrite(name, host.files.get(name)))
        host.files[name] = data

    def _spawn(self, host: Host, implant: Implant, name: str) -> hostmodel.ProcessRecord:
        rec = host.spawn(name)
        implant.pid = rec.pid
        self._journal(implant, ProcessSpawn(rec.pid))
        return rec

    def _register(self, implant: Implant) -> Implant:
        self.state(implant.host).active_implants.append(implant)
        self._emit("ImplantDeployed", host=implant.host, implant=implant.kind, memory=implant.memory_resident)
        return implant

    def grant_access(self, target: str, vector: str) -> None:
        state = self.state(target)
        if target not in self.pre_census:
            self.pre_census[target] = self.world.host(target).census()
        if vector not in state.access:
            state.access.append(vector)
            self._emit("AccessGained", target=target, vector=vector)

    def _code_exec(self, target: str) -> Host:
        if not self.state(target).has(Stage.EXPLOITED):
            raise StageViolation(f"{target}: no code execution (not Exploited)")
        return self.world.host(target)

    def _derive_channel(self, target: str) -> tuple[ChannelState, ChannelState]:
        if target not in self.channels:
            key = sha256(self.master + b"chan:" + target.encode())
            nonce = sha256(self.master + b"nonce:" + target.encode())[:8]
            a = ChannelState(key, nonce)
            self.channels[target] = (a, a.peer())
        return self.channels[target]

    def _sealed_send(self, src: str, dst: str, chan_out: ChannelState, chan_in: ChannelState, data: bytes) -> tuple[bytes, int]:
        """Seal ``data`` on one end, carry it, open it on the other."""
        if chan_out.closed:
            raise ChannelClosed(f"{src}->{dst}")
        d = self.world.transmit(src, dst, Proto.SESSION, seal(chan_out, data))
        if d is None:
            reason = self.world.drop_reason(src, dst)
            raise ChannelClosed(f"{src}->{dst}: {reason.value if reason else 'connection lost'}")
        return open_sealed(chan_in, d.payload), d.size

    def _to_target(self, target: str, data: bytes, src: str | None = None) -> bytes:
        attacker, implant = self.channels[target]
        return self._sealed_send(src or self.c2, target, attacker, implant, data)[0]

    # -- validation ------------------------------------------------------
    def interest_score(self, host: Host) -> int:
        volume = sum(len(v) for v in host.files.values()) + sum(len(c) for c in host.credentials)
        return sum(self.weights.get(t, 0) for t in host.tags) + volume // max(1, self.volume_unit)

    def validate_target(self, target: str, threshold: int | None = None) -> ValidationOutcome:
        state = self.state(target)
        if not state.access:
            raise NoAccessVector(target)
        host = self.world.host(target)
        threshold = self.threshold if threshold is None else threshold
        with self._attempt(target, Stage.VALIDATED, "validator"):
            implant = Implant(ImplantKind.VALIDATOR, target)
            self._write_file(host, implant, "~DF3A1.tmp", b"DOUBLEFANTASY" + target.encode())
            self._spawn(host, implant, "dfsvc.exe")
            score = self.interest_score(host)
            state.interest_score = score
            self._emit("ValidatorScore", target=target, score=score, threshold=threshold)
            if score < threshold:
                self.self_destruct(target, implant)
                self._outcome("StageFailed", target, Stage.VALIDATED, "validator", reason="BelowThreshold")
                state.halted = True
                return ValidationOutcome(False, score, threshold)
            self._register(implant)
            self._achieve(target, Stage.VALIDATED, "validator")
        return ValidationOutcome(True, score, threshold)

    # -- firewall chain --------------------------------------------------
    def extrabacon(self, target: str, community_guesses: list[str]) -> ExploitOutcome:
        host = self.world.host(target)
        with self._attempt(target, Stage.EXPLOITED, "extrabacon"):
            if not host.snmp.enabled:
                raise PreconditionFailed("SNMP")
            if not community_guesses:
                raise PreconditionFailed("Community")
            if not host.ipv4_enabled:
                raise PreconditionFailed("IPv4")
            if not self.world.reachable(self.c2, target, Proto.SNMP):
                raise PreconditionFailed("Interface")
            found = info = None
            for guess in community_guesses:
                try:
                    info = self.world.snmp_request(self.c2, target, SnmpRequest(guess, "Info"))
                except AuthFail:
                    continue
                found = guess
                break
            if found is None:
                raise AuthFail(f"{target}: none of {len(community_guesses)} community guesses accepted")
            self.world.snmp_request(self.c2, target, SnmpRequest(found, "SetAuthMode", "pass-disabled"))
            self.grant_access(target, "extrabacon")
            self._emit("ExploitStep", target=target, technique="extrabacon", result="pass-disabled")
        return ExploitOutcome(True, info.value)

    def epicbanana(
        self,
        target: str,
        transport: str = "SshLike",
        creds: tuple[str, str] | None = None,
        target_version: str = "",
        shellcode: bytes = b"\x90" * 16,
    ) -> ExploitOutcome:
        state = self.state(target)
        host = self.world.host(target)
        technique = "epicbanana"
        with self._attempt(target, Stage.EXPLOITED, technique):
            if not state.has(Stage.VALIDATED):
                raise StageViolation(f"{target}: EPICBANANA before validation")
            if not self.world.reachable(self.c2, target, Proto.SESSION):
                raise TransportUnreachable(f"{transport} to {target}")
            guess = self.rng.getrandbits(host.hardening.aslr_entropy_bits)
            payload = hostmodel.build_overflow(host.hardening.buffer_capacity, target_version, guess, shellcode)
            self.world.transmit(self.c2, target, Proto.SESSION, payload)

            def canary(h: Host) -> None:
                self.world.ledger.record(self.world.clock, Detector.CANARY, h.id, "stack canary smashed in CLI parser", technique)

            outcome = hostmodel.cli_handle(host, Session(transport, creds), payload, canary)
        self._emit("CliResult", target=target, outcome=outcome)
        if outcome is CliOutcome.CODE_EXEC:
            self._achieve(target, Stage.EXPLOITED, technique)
            return ExploitOutcome(True, "code execution", outcome)
        aslr_miss = host.hardening.aslr and guess != host.aslr_slide
        if outcome in (CliOutcome.REJECTED, CliOutcome.CRASH_DETECTED) or aslr_miss:
            self._outcome("StageBlocked", target, Stage.EXPLOITED, technique, by="parser", reason=outcome.value)
        else:
            self._outcome("StageFailed", target, Stage.EXPLOITED, technique, reason=outcome.value)
        return ExploitOutcome(False, outcome.value, outcome)

    def banalride_handshake(self, target: str) -> ChannelState:
        self._code_exec(target)
        with self._attempt(target, Stage.IMPLANTED, "banalride"):
            a_priv, a_pub = cryptokit.dh_keypair(self.group, self.rng)
            a_nonce = self.rng.randbytes(4)
            hello = self.world.transmit(self.c2, target, Proto.UDP, encode_handshake(a_nonce, a_pub))
            if hello is None:
                raise Unreachable(f"{target}: handshake dropped")
            peer_nonce, peer_pub = parse_handshake(hello.payload)
            b_priv, b_pub = cryptokit.dh_keypair(self.group, self._responder_rng)
            b_nonce = self._responder_rng.randbytes(4)
            reply = self.world.transmit(target, self.c2, Proto.UDP, encode_handshake(b_nonce, b_pub))
            if reply is None:
                raise Unreachable(f"{target}: handshake reply dropped")
            r_nonce, r_pub = parse_handshake(reply.payload)
            nonce = a_nonce + r_nonce
            attacker = ChannelState(cryptokit.dh_shared(self.group, a_priv, r_pub), nonce)
            implant = ChannelState(cryptokit.dh_shared(self.group, b_priv, peer_pub), peer_nonce + b_nonce)
            self.channels[target] = (attacker, implant)
            self._emit("ChannelEstablished", target=target, technique="banalride")
        return attacker

    def deploy_banaglee(self, target: str) -> Implant:
        host = self._code_exec(target)
        with self._attempt(target, Stage.IMPLANTED, "banaglee"):
            if target not in self.channels or self.channels[target][0].closed:
                raise ChannelClosed(f"{target}: no BANALRIDE channel")
            self._to_target(target, b"BANAGLEE implant image v3.1")
            implant = Implant(ImplantKind.BANAGLEE, target, memory_resident=True)
            self._spawn(host, implant, "banaglee")
            self._register(implant)
            self._achieve(target, Stage.IMPLANTED, "banaglee")
        return implant

    def banaglee_command(self, target: str, command: bytes) -> bytes:
        host = self.world.host(target)
        imp = self.state(target).implant(ImplantKind.BANAGLEE)
        if imp is None or imp.pid not in host.processes:
            raise StageViolation(f"{target}: BANAGLEE not running")
        received = self._to_target(target, command)
        if received.startswith(b"capture"):
            output = self.world.rng(f"traffic:{target}:{self.world.clock}").randbytes(1536)
        else:
            output = f"{host.snmp.model} {host.firmware.version} ok".encode()
        attacker, implant = self.channels[target]
        return self._sealed_send(target, self.c2, implant, attacker, output)[0]

    def install_jetplow(self, target: str) -> Implant:
        host = self.world.host(target)
        with self._attempt(target, Stage.PERSISTENT, "jetplow"):
            banaglee = self.state(target).implant(ImplantKind.BANAGLEE)
            if banaglee is None or banaglee.pid not in host.processes:
                raise StageViolation(f"{target}: JETPLOW needs a running BANAGLEE")
            blob = self._to_target(target, JETPLOW_MAGIC + sha256(self.master + target.encode()))
            seg = max(host.firmware.segments)
            undo = self.world.write_firmware(host, {seg: blob}, Provenance.ATTACKER_WRITE, technique="jetplow")
            implant = Implant(ImplantKind.JETPLOW, target, host_artifacts=list(undo))
            self._register(implant)
            self._achieve(target, Stage.PERSISTENT, "jetplow")
        return implant

    # -- lateral movement and staged payloads ----------------------------
    def lateral_move(self, pivot: str, target: str, first_payload: StagePayload | None = None) -> None:
        if pivot != self.c2 and not self.state(pivot).has(Stage.IMPLANTED):
            raise StageViolation(f"{pivot}: cannot pivot before an implant is in place")
        payload = first_payload or StagePayload(1, b"stage1:validator:" + target.encode())
        with self._attempt(target, Stage.VALIDATED, "lateral_movement"):
            self.world.host(target)
            reason = self.world.drop_reason(pivot, target)
            if reason is not None:
                err = Blocked(f"{pivot}->{target}: {reason.value}")
                if reason is DropReason.VLAN_POLICY:
                    err.blocked_by = "vlan_segmentation"
                self.world.transmit(pivot, target, Proto.SESSION, b"\x00" * 24)
                raise err
            self.pre_census.setdefault(target, self.world.host(target).census())
            self._derive_channel(target)
            self.staged[target] = StagedDelivery(target, pivot)
            self._deliver(target, payload)
            self.grant_access(target, f"lateral:{pivot}")

    def _deliver(self, target: str, payload: StagePayload) -> None:
        sd = self.staged[target]
        self._to_target(target, payload.blob, src=sd.src)
        payload.delivered = True
        self._emit("PayloadDelivered", target=target, index=payload.index, sha256=hashlib.sha256(payload.blob).hexdigest())

    def next_stage(self, target: str, payload: StagePayload) -> StagePayload:
        sd = self.staged.get(target)
        prior = payload.index - 1
        if sd is None or sd.failed or (prior >= 1 and prior not in sd.succeeded):
            raise StageNotSucceeded(f"{target}: stage {prior} has not reported success")
        self._deliver(target, payload)
        return payload

    def report_stage(self, target: str, index: int, ok: bool, reason: str = "") -> None:
        sd = self.staged.setdefault(target, StagedDelivery(target, self.c2))
        self._emit("StageReport", target=target, index=index, ok=ok, reason=reason or "-")
        if ok:
            sd.succeeded.add(index)
        else:
            sd.failed = True
            self.abort(target)

    def run_loader(self, target: str) -> Implant:
        """Stage-2 loader: code execution on a host reached laterally."""
        host = self.world.host(target)
        with self._attempt(target, Stage.EXPLOITED, "loader"):
            if not self.state(target).has(Stage.VALIDATED):
                raise StageViolation(f"{target}: loader before validation")
            implant = Implant(ImplantKind.LOADER, target, memory_resident=True)
            self._spawn(host, implant, "svchost.exe")
            self._register(implant)
            self._achieve(target, Stage.EXPLOITED, "loader")
        return implant

    def run_dropper(self, target: str) -> Implant:
        host = self._code_exec(target)
        with self._attempt(target, Stage.IMPLANTED, "dropper"):
            implant = Implant(ImplantKind.LOADER, target, memory_resident=True)
            self._spawn(host, implant, "msiexec.exe")
            self._register(implant)
            self._achieve(target, Stage.IMPLANTED, "dropper")
        return implant

    def sandbox_probe(self, target: str, delay_ticks: int) -> ProbeOutcome:
        host = self._code_exec(target)
        self._emit("SleepEx", target=target, delay=delay_ticks)
        if host.session_budget is not None and host.session_budget < delay_ticks:
            self.world.advance(host.session_budget)
            self._emit("SessionTerminated", target=target, budget=host.session_budget)
            self.state(target).halted = True
            return ProbeOutcome(False, self.world.clock)
        self.world.advance(delay_ticks)
        return ProbeOutcome(True, self.world.clock)

    # -- espionage platforms ---------------------------------------------
    def deploy_platform(self, target: str, kind: ImplantKind | str) -> Implant:
        kind = ImplantKind(kind)
        if kind not in PLATFORMS:
            raise ValueError(f"{kind.value} is not an espionage platform")
        state = self.state(target)
        if not state.has(Stage.IMPLANTED):
            raise StageViolation(f"{target}: platform deploy requires Implanted")
        host = self.world.host(target)
        technique = kind.value.lower()
        with self._attempt(target, Stage.PERSISTENT, technique):
            self._derive_channel(target)
            self._to_target(target, f"{kind.value} orchestrator".encode(), src=self._route(target))
            implant = self._install_platform(host, kind)
            self._achieve(target, Stage.PERSISTENT, technique)
        return implant

    def _route(self, target: str) -> str:
        sd = self.staged.get(target)
        return sd.src if sd is not None else self.c2

    def _install_platform(self, host: Host, kind: ImplantKind) -> Implant:
        implant = Implant(kind, host.id)
        if kind is ImplantKind.EQUATION_DRUG:
            self._journal(implant, DriverLoad("mscfg32.sys"))
            host.drivers.add("mscfg32.sys")
            self._write_file(host, implant, "mscfg32.exe", b"MZ user-mode loader")
            self._write_file(host, implant, "mscfg32.dll", b"MZ central orchestrator")
            self._spawn(host, implant, "mscfg32.exe")
        else:
            self._journal(implant, DriverLoad("grayfish.sys"))
            host.drivers.add("grayfish.sys")
        for plugin in DEFAULT_PLUGINS:
            implant.add_plugin(*plugin)
        implant.vfs = Vfs(host.bootable_object_id, salted=self.salted_kdf)
        self._register(implant)
        if kind is ImplantKind.GRAYFISH:
            implant.vfs.put(VFS_PROBE, VFS_PROBE_DATA)
            self.install_bootkit(host.id, implant)
            self.hook_kernel(host.id, self.hook_function, 0xFFFFF800DEAD0000 + len(implant.hooks), implant)
        return implant

    def install_bootkit(self, target: str, implant: Implant | None = None) -> BootkitRecord:
        host = self._code_exec(target)
        if implant is None:
            implant = self.state(target).implant(ImplantKind.GRAYFISH)
            if implant is None:
                implant = self._register(Implant(ImplantKind.GRAYFISH, target, vfs=Vfs(host.bootable_object_id, salted=self.salted_kdf)))
                implant.vfs.put(VFS_PROBE, VFS_PROBE_DATA)
        candidates = [r for r in host.disk.dark_regions() if r.length >= BOOTKIT_BODY_SECTORS]
        if not candidates:
            raise NoDarkSpace(f"{target}: no dark region of {BOOTKIT_BODY_SECTORS} sectors")
        region = max(candidates, key=lambda r: (r.length, -r.start_lba))
        body = BOOTKIT_BODY_MAGIC + self.world.rng(f"bootkit:{target}").randbytes(BOOTKIT_BODY_SECTORS * 512 - 8)
        self._journal(implant, host.write_sectors(region.start_lba, body, Provenance.ATTACKER_WRITE))
        stub = BOOTKIT_STUB_MAGIC + region.start_lba.to_bytes(4, "little") + BOOTKIT_BODY_SECTORS.to_bytes(2, "little")
        self._journal(implant, host.write_sectors(0, stub, Provenance.ATTACKER_WRITE))
        host.bootkit_handler = _GrayfishBootkit(self, implant)
        record = BootkitRecord(0, region.start_lba, BOOTKIT_BODY_SECTORS)
        self._emit("BootkitInstalled", host=target, body_lba=region.start_lba, region=region.kind)
        return record

    def hook_kernel(self, target: str, function_name: str, new_address: int, implant: Implant | None = None) -> HookRecord:
        host = self.world.host(target)
        implant = implant or self.state(target).implant(*PLATFORMS)
        if implant is None and host.bootkit_handler is None:
            raise StageViolation(f"{target}: no bootkit or driver to run the rootkit")
        proc = hostmodel.lookup_process_by_id(host, self.hardcoded_pid)
        name_hash = cryptokit.fn_name_hash(function_name)
        table = host.kernel_table.entries
        if name_hash not in table:
            raise UnknownFunction(f"{function_name} ({name_hash:#010x}) not in kernel table")
        before = table[name_hash]
        self._journal(implant, KernelPatch(name_hash, before))
        table[name_hash] = new_address
        implant.hooks[name_hash] = new_address
        buffer = tuple(sorted((h, a) for h, a in host.kernel_table.pristine.items() if h in implant.hooks))
        self._emit("KernelHook", host=target, function=function_name, hash=f"{name_hash:#010x}")
        return HookRecord(function_name, name_hash, before, new_address, proc.object_address, buffer)

    def flasher_implant(self, target: str, chunks: int = 2) -> Implant:
        host = self.world.host(target)
        with self._attempt(target, Stage.PERSISTENT, "flasher"):
            platform = self.state(target).implant(*PLATFORMS)
            if platform is None:
                raise StageViolation(f"{target}: firmware flasher needs an active platform")
            if target not in self.channels:
                raise ChannelClosed(f"{target}: no channel to the command server")
            image = FLASHER_MAGIC + sha256(self.master + b"hdd:" + target.encode()) * 4
            step = -(-len(image) // chunks)
            received = b""
            for i in range(0, len(image), step):
                received += self._to_target(target, image[i : i + step], src=self.c2)
            seg = max(host.firmware.segments)
            undo = self.world.write_firmware(host, {seg: received}, Provenance.ATTACKER_WRITE, technique="flasher")
            platform.host_artifacts.extend(undo)
            self._achieve(target, Stage.PERSISTENT, "flasher")
        return platform

    # -- collection and exfiltration -------------------------------------
    def collect(self, target: str) -> int:
        host = self.world.host(target)
        state = self.state(target)
        platform = state.implant(*PLATFORMS)
        technique = "plugins" if platform else "banaglee"
        with self._attempt(target, Stage.COLLECTED, technique):
            if platform is not None:
                for name in sorted(host.files):
                    platform.vfs.put(f"file:{name}", host.files[name])
                shot = self.world.rng(f"screenshot:{target}").randbytes(SCREENSHOT_SIZE)
                platform.vfs.put("screenshot:0", shot)
                total = sum(len(d) for _, d in platform.vfs.dump() if _ != VFS_PROBE)
            else:
                capture = self.banaglee_command(target, b"capture traffic")
                loot = [("capture", capture)] + [(n, host.files[n]) for n in sorted(host.files)]
                self.loot[target] = loot
                total = sum(len(d) for _, d in loot)
            self._achieve(target, Stage.COLLECTED, technique)
        self._emit("Collected", target=target, bytes=total)
        return total

    def exfiltrate(self, target: str) -> ExfilReport:
        state = self.state(target)
        platform = state.implant(*PLATFORMS)
        with self._attempt(target, Stage.EXFILTRATED, "c2_exfil"):
            if target not in self.channels:
                raise NoChannel(target)
            if platform is not None:
                items = [(n, d) for n, d in platform.vfs.dump() if n != VFS_PROBE]
            else:
                items = self.loot.get(target, [])
            blob = b"".join(len(n).to_bytes(2, "big") + n.encode() + len(d).to_bytes(4, "big") + d for n, d in items)
            report = self._send_out(target, target, blob)
            self._achieve(target, Stage.EXFILTRATED, "c2_exfil")
        self._record_exfil(target, target, report, blob)
        return report

    def _send_out(self, target: str, src: str, blob: bytes, channel: tuple[ChannelState, ChannelState] | None = None) -> ExfilReport:
        attacker, implant = channel or self.channels[target]
        wire = n = 0
        for i in range(0, len(blob), EXFIL_CHUNK):
            try:
                _, size = self._sealed_send(src, self.c2, implant, attacker, blob[i : i + EXFIL_CHUNK])
            except ChannelClosed as exc:
                raise NoChannel(str(exc)) from exc
            wire += size
            n += 1
        return ExfilReport(wire, n, len(blob))

    def _record_exfil(self, origin: str, via: str, report: ExfilReport, blob: bytes, device: str = "-") -> None:
        self.exfiltrated += report.bytes
        self._emit(
            "Exfiltrated",
            target=origin,
            via=via,
            device=device,
            bytes=report.bytes,
            datagrams=report.datagrams,
            plain_sha256=hashlib.sha256(blob).hexdigest(),
        )

    # -- FANNY -------------------------------------------------------------
    def fanny_infect(self, target: str, device: UsbDevice) -> Implant | None:
        host = self.world.host(target)
        self.grant_access(target, f"usb:{device.id}")
        if not self.validate_target(target).validated:
            return None
        with self._attempt(target, Stage.EXPLOITED, "fanny_autorun"):
            self._achieve(target, Stage.EXPLOITED, "fanny_autorun")
        with self._attempt(target, Stage.IMPLANTED, "fanny"):
            implant = Implant(ImplantKind.FANNY, target)
            self._spawn(host, implant, "fanny.exe")
            self._register(implant)
            self._achieve(target, Stage.IMPLANTED, "fanny")
        with self._attempt(target, Stage.PERSISTENT, "fanny"):
            self._write_file(host, implant, "fanny.bmp", b"FANNY worm body")
            self._write_file(host, implant, "autorun.inf", b"[autorun]\nopen=fanny.bmp\n")
            self._achieve(target, Stage.PERSISTENT, "fanny")
        return implant

    def fanny_on_insert(self, target: str, device: UsbDevice) -> FannyActions:
        host = self.world.host(target)
        if not any(d is device for d in host.usb_ports):
            raise Blocked(f"{device.id} is not attached to {target}")
        with self._attempt(target, Stage.COLLECTED, "fanny"):
            records = parse_hidden_store(device.hidden_store)
            commands = [body for kind, body in records if kind is Rec.COMMAND]
            kept = [(kind, body) for kind, body in records if kind is not Rec.COMMAND]
            policy = self.world.policy.effective_vlan_policy()
            neighbours = tuple(
                n for n in sorted(self.world.topology.nodes)
                if n != target and self.world.topology.reachable(policy, target, n)
            )
            results = [self._fanny_command(host, cmd, neighbours) for cmd in commands]
            info = f"{host.id} {host.kind.value} {host.firmware.version} ipv4={host.ipv4_enabled}".encode()
            candidates = (
                [(Rec.CREDENTIAL, c) for c in host.credentials]
                + [(Rec.NETMAP, ",".join(neighbours).encode())]
                + [(Rec.HOSTINFO, info)]
                + [(Rec.RESULT, r) for r in results]
            )
            room = HIDDEN_STORE_CAPACITY - len(encode_records(kept))
            taken, exhausted = fanny_greedy_fill(candidates, room)
            store = encode_records(kept + taken)
            device.hidden_store = bytearray(store)
            origins = self.fanny_origins.setdefault(device.id, [])
            if target not in origins:
                origins.append(target)
            self._emit(
                "HiddenStoreWrite",
                host=target,
                device=device.id,
                size=len(store),
                sha256=hashlib.sha256(store).hexdigest(),
                exhausted=exhausted,
            )
            self._achieve(target, Stage.COLLECTED, "fanny")
        return FannyActions(
            target,
            neighbours,
            tuple((Rec(k).name, len(b)) for k, b in taken),
            len(commands),
            exhausted,
        )

    @staticmethod
    def _fanny_command(host: Host, command: bytes, neighbours: tuple[str, ...]) -> bytes:
        verb = command.split(b"\x00", 1)[0].strip()
        if verb == b"hostname":
            return host.id.encode()
        if verb == b"netmap":
            return ",".join(neighbours).encode()
        if verb == b"dir":
            return "\n".join(sorted(host.files)).encode()
        return b"unknown command: " + verb[:32]

    def _fanny_channel(self, device: UsbDevice) -> tuple[ChannelState, ChannelState]:
        key = sha256(self.master + b"fanny-psk")
        nonce = sha256(device.id.encode())[:8]
        a = ChannelState(key, nonce)
        return a, a.peer()

    def fanny_exfil(self, host_id: str, device: UsbDevice) -> ExfilReport:
        if self.world.is_airgapped(host_id, self.c2) or not self.world.reachable(host_id, self.c2):
            raise NoChannel(f"{host_id} has no route to the command server")
        blob = bytes(device.hidden_store)
        if not blob:
            return ExfilReport(0, 0, 0)
        origins = [o for o in self.fanny_origins.get(device.id, []) if self.state(o).has(Stage.IMPLANTED)]
        for origin in origins:
            self._emit("StageAttempt", target=origin, stage=Stage.EXFILTRATED, technique="fanny_usb")
        report = self._send_out(host_id, host_id, blob, channel=self._fanny_channel(device))
        device.hidden_store = bytearray()
        self._record_exfil(",".join(origins) or host_id, host_id, report, blob, device.id)
        for origin in origins:
            self._achieve(origin, Stage.EXFILTRATED, "fanny_usb")
        return report

    def _on_usb(self, host: Host, device: UsbDevice, port: hostmodel.PortState) -> None:
        if device.autorun != FANNY_AUTORUN:
            return
        airgapped = self.world.is_airgapped(host.id, self.c2)
        if not port.admitted:
            stage = Stage.VALIDATED if airgapped else Stage.EXFILTRATED
            self._emit("StageAttempt", target=host.id, stage=stage, technique="fanny_delivery")
            self._outcome("StageBlocked", host.id, stage, "fanny_delivery", by="usb_gate", reason="UsbGate")
            return
        if not port.autorun_scheduled:
            return
        try:
            if airgapped:
                if self.fanny_infect(host.id, device) is not None:
                    self.fanny_on_insert(host.id, device)
            elif device.hidden_store and self.fanny_origins.get(device.id):
                self.fanny_exfil(host.id, device)
        except ShadowRangeError as exc:
            log.debug("FANNY on %s stopped: %s", host.id, exc)

    # -- interdiction ------------------------------------------------------
    def interdict_media(self, shipment: str, trojan: UsbDevice) -> DeliveryEvent:
        s = self.world.shipments.get(shipment)
        if s is None or s.delivered:
            raise NoShipment(shipment)
        trojan.visible_files = dict(s.device.visible_files)
        s.device = trojan
        s.interdicted = True
        self._emit("Interdicted", shipment=shipment, dest=s.dest, device=trojan.id)
        return DeliveryEvent(shipment, s.dest, trojan.id, s.arrival)

    # -- cleanup -------------------------------------------------------------
    def self_destruct(self, target: str, implant: Implant) -> hostmodel.Census:
        host = self.world.host(target)
        if implant.active or implant.host_artifacts:
            for artifact in reversed(implant.host_artifacts):
                revert(host, artifact)
            implant.host_artifacts.clear()
            if implant.pid is not None:
                host.kill(implant.pid)
            if implant.vfs is not None:
                implant.vfs.erase()
            if isinstance(host.bootkit_handler, _GrayfishBootkit) and host.bootkit_handler.implant is implant:
                host.bootkit_handler = None
            implant.active = False
            state = self.state(target)
            if implant in state.active_implants:
                state.active_implants.remove(implant)
            self._emit("SelfDestruct", host=target, implant=implant.kind)
        return host.census()

    def abort(self, target: str) -> hostmodel.Census:
        state = self.state(target)
        state.halted = True
        for implant in reversed(list(state.active_implants)):
            self.self_destruct(target, implant)
        return self.world.host(target).census()

    # -- reboot handling -------------------------------------------------------
    def _on_boot(self, host: Host, trace: list) -> None:
        state = self.states.get(host.id)
        if state is None:
            return
        for imp in list(state.active_implants):
            if imp.memory_resident and imp.pid not in host.processes:
                imp.active = False
                state.active_implants.remove(imp)
                self._emit("ImplantLost", host=host.id, implant=imp.kind)
        if not host.booted:
            return
        segments = host.firmware.segments.values()
        if any(b.startswith(JETPLOW_MAGIC) for b in segments) and state.implant(ImplantKind.BANAGLEE) is None:
            implant = Implant(ImplantKind.BANAGLEE, host.id, memory_resident=True)
            self._spawn(host, implant, "banaglee")
            self._register(implant)
            self._emit("ImplantRestored", host=host.id, implant=ImplantKind.BANAGLEE, via="jetplow")
        platform = state.implant(*PLATFORMS)
        if any(b.startswith(FLASHER_MAGIC) for b in segments) and platform is not None and not self._platform_intact(host, platform):
            self._restore_platform(host, platform)

    @staticmethod
    def _platform_intact(host: Host, platform: Implant) -> bool:
        if platform.kind is ImplantKind.GRAYFISH:
            return host.disk.provenance[0] == Provenance.ATTACKER_WRITE
        return "mscfg32.dll" in host.files

    def _restore_platform(self, host: Host, old: Implant) -> None:
        attacker, implant_end = self._derive_channel(host.id)
        try:
            self._sealed_send(host.id, self.c2, implant_end, attacker, b"flasher beacon")
            self._to_target(host.id, f"{old.kind.value} orchestrator".encode())
        except ChannelClosed:
            return
        old.active = False
        old_state = self.state(host.id)
        old_state.active_implants.remove(old)
        # The firmware copy stays with the new platform so a later wipe can be undone again.
        firmware = [a for a in old.host_artifacts if isinstance(a, FirmwareWrite)]
        new = self._install_platform(host, old.kind)
        new.host_artifacts[:0] = firmware
        self._emit("ImplantRestored", host=host.id, implant=old.kind, via="flasher")


class _GrayfishBootkit:
    def __init__(self, campaign: Campaign, implant: Implant):
        self.campaign = campaign
        self.implant = implant

    def startup(self, host: Host) -> bool:
        try:
            ok = self.implant.vfs.get(VFS_PROBE, host.bootable_object_id) == VFS_PROBE_DATA
        except (TagMismatch, NotFound):
            ok = False
        if not ok:
            self.campaign._emit("BootkitStartupError", host=host.id)
            self.campaign.self_destruct(host.id, self.implant)
        return ok

    def after_kernel(self, host: Host) -> None:
        host.kernel_table.entries.update(self.implant.hooks)
