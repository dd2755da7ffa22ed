"""Scenario files, the deterministic run loop, scoring and replay.

Scenario grammar (one entry per line, ``#`` starts a comment)::

    [scenario]   name, seed, max_ticks, expect (defended|any)
    [topology]   node = ID kind=K vlan=V partition=P
                 link = A B
                 allow = VLAN_FROM VLAN_TO        (used when vlan_segmentation is on)
    [hosts]      host = ID [tags=a,b] [files=name:size,...] [credentials=N]
                           [version=V] [community=S] [model=M] [admin=user:pw]
                           [disk=SECTORS] [capacity=BYTES] [aslr_bits=N] [budget=TICKS]
                 weight = TAG N
                 device = ID [credential=HEX] [files=name:size,...]
    [defense]    usb_gate|parser|firmware_auth|dark_region_monitor|traffic_monitor|
                 vlan_segmentation|kernel_audit|usb_two_factor|all = on|off
                 hardening = bounds,canary,aslr ; scan_interval = N ; snmp_threshold = N
                 safelist = DEVICE ; vendor_key = HEX
    [attacker]   c2 = ID ; threshold = N ; salted_kdf = on|off ; hook = FUNCTION
                 goal = VERB TARGET k=v ...
                 fail = TARGET:STAGE_INDEX
    [shipments]  shipment = NAME dest=ID arrival=TICK [files=name:size,...]
    [activity]   at = TICK verb=VERB target=ID k=v ...

Goal verbs: ``firewall``, ``platform``, ``interdict`` and ``carry``.
"""

from __future__ import annotations

import hashlib
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import attackchain, hostmodel
from .attackchain import STAGES, Campaign, ImplantKind, StagePayload
from .cryptokit import firmware_tag, sha256
from .defense import TOGGLES, DefensePolicy, credential_digest
from .errors import CorruptLog, ParseError, ShadowRangeError, UnknownReference, VersionMismatch
from .eventlog import LOG_VERSION, EventLog, Record, encode_value
from .hostmodel import Host, HostKind, ParserHardening, SnmpAgent, UsbDevice
from .netsim import Topology, VlanPolicy
from .world import Activity, OutOfTime, Shipment, World

log = logging.getLogger(__name__)

SECTIONS = ("scenario", "topology", "hosts", "defense", "attacker", "shipments", "activity")
GOAL_VERBS = ("firewall", "platform", "interdict", "carry")
ACTIVITY_VERBS = ("vendor_update", "os_update", "reboot", "reimage", "usb")
DEFENSE_FLAGS = TOGGLES + ("kernel_audit", "usb_two_factor")


# -- declarations --------------------------------------------------------------

@dataclass
class NodeDecl:
    id: str
    kind: HostKind
    vlan: str
    partition: str


@dataclass
class HostDecl:
    id: str
    tags: tuple[str, ...] = ()
    files: dict[str, int] = field(default_factory=dict)
    credentials: int = 0
    version: str = "v1"
    community: str = "public"
    model: str = "generic"
    admin: tuple[str, str] = ("admin", "admin")
    disk: int = 4096
    capacity: int = 128
    aslr_bits: int = 8
    budget: int | None = None


@dataclass
class DeviceDecl:
    id: str
    credential: bytes = b"\x00" * 32
    files: dict[str, int] = field(default_factory=dict)


@dataclass
class Goal:
    verb: str
    target: str
    params: dict[str, str] = field(default_factory=dict)
    line: int = 0

    def get(self, key: str, default: str = "") -> str:
        return self.params.get(key, default)

    def flag(self, key: str, default: bool = False) -> bool:
        if key not in self.params:
            return default
        return self.params[key].lower() in ("yes", "on", "true", "1")

    def list(self, key: str, default: list[str] | None = None) -> list[str]:
        if key not in self.params:
            return list(default or [])
        return [v for v in self.params[key].split(",") if v]


@dataclass
class ShipmentDecl:
    name: str
    dest: str
    arrival: int
    files: dict[str, int] = field(default_factory=dict)


@dataclass
class Scenario:
    name: str = "unnamed"
    seed: int = 0
    max_ticks: int = 10_000
    expect: str = "any"
    nodes: list[NodeDecl] = field(default_factory=list)
    links: list[tuple[str, str]] = field(default_factory=list)
    vlan_allow: list[tuple[str, str]] = field(default_factory=list)
    hosts: dict[str, HostDecl] = field(default_factory=dict)
    weights: dict[str, int] = field(default_factory=dict)
    devices: dict[str, DeviceDecl] = field(default_factory=dict)
    defense: dict[str, bool] = field(default_factory=dict)
    hardening: tuple[str, ...] = ("bounds", "canary", "aslr")
    scan_interval: int = 10
    snmp_threshold: int = 3
    safelist: list[str] = field(default_factory=list)
    vendor_key: bytes = b""
    c2: str = ""
    threshold: int = 1
    salted_kdf: bool = False
    hook: str = "ZwQuerySystemInformation"
    goals: list[Goal] = field(default_factory=list)
    failures: dict[str, int] = field(default_factory=dict)
    shipments: list[ShipmentDecl] = field(default_factory=list)
    activities: list[Activity] = field(default_factory=list)

    def node(self, node_id: str) -> NodeDecl:
        return next(n for n in self.nodes if n.id == node_id)

    def with_defenses(self, **flags: bool) -> "Scenario":
        from dataclasses import replace

        return replace(self, defense={**self.defense, **flags})


# -- parsing -------------------------------------------------------------------

def _split_kv(tokens: list[str], line: int) -> dict[str, str]:
    out = {}
    for tok in tokens:
        key, sep, value = tok.partition("=")
        if not sep or not key:
            raise ParseError(f"expected key=value, got {tok!r}", line)
        if key in out:
            raise ParseError(f"duplicate key {key!r}", line)
        out[key] = value
    return out


def _int(value: str, what: str, line: int, minimum: int | None = None) -> int:
    try:
        n = int(value, 0)
    except ValueError:
        raise ParseError(f"{what} must be an integer, got {value!r}", line) from None
    if minimum is not None and n < minimum:
        raise ParseError(f"{what} must be >= {minimum}", line)
    return n


def _bool(value: str, line: int) -> bool:
    v = value.lower()
    if v in ("on", "yes", "true", "1"):
        return True
    if v in ("off", "no", "false", "0"):
        return False
    raise ParseError(f"expected on/off, got {value!r}", line)


def _hex(value: str, line: int) -> bytes:
    try:
        return bytes.fromhex(value)
    except ValueError:
        raise ParseError(f"expected hex, got {value!r}", line) from None


def _sizes(value: str, line: int) -> dict[str, int]:
    out = {}
    for item in filter(None, value.split(",")):
        name, sep, size = item.rpartition(":")
        if not sep or not name:
            raise ParseError(f"file entries are name:size, got {item!r}", line)
        out[name] = _int(size, "file size", line, 0)
    return out


class _Parser:
    def __init__(self):
        self.s = Scenario()
        self.refs: list[tuple[str, int, str]] = []  # (node id, line, context)
        self.node_lines: dict[str, int] = {}

    def ref(self, node: str, line: int, context: str) -> None:
        self.refs.append((node, line, context))

    def entry(self, section: str, key: str, value: str, line: int) -> None:
        handler = getattr(self, f"_{section}")
        handler(key, value, line)

    # sections
    def _scenario(self, key: str, value: str, line: int) -> None:
        s = self.s
        if key == "name":
            s.name = value
        elif key == "seed":
            s.seed = _int(value, "seed", line)
            if not -(2**63) <= s.seed < 2**64:
                raise ParseError("seed must fit in 64 bits", line)
        elif key == "max_ticks":
            s.max_ticks = _int(value, "max_ticks", line, 0)
        elif key == "expect":
            if value not in ("defended", "any"):
                raise ParseError("expect is 'defended' or 'any'", line)
            s.expect = value
        else:
            raise ParseError(f"unknown [scenario] key {key!r}", line)

    def _topology(self, key: str, value: str, line: int) -> None:
        tokens = value.split()
        if key == "node":
            if not tokens:
                raise ParseError("node needs an id", line)
            node_id, kv = tokens[0], _split_kv(tokens[1:], line)
            if node_id in self.node_lines:
                raise ParseError(f"duplicate node {node_id!r} (first declared on line {self.node_lines[node_id]})", line)
            try:
                kind = HostKind(kv.get("kind", "Workstation"))
            except ValueError:
                raise ParseError(f"unknown node kind {kv.get('kind')!r}", line) from None
            unknown = set(kv) - {"kind", "vlan", "partition"}
            if unknown:
                raise ParseError(f"unknown node attributes {sorted(unknown)}", line)
            self.node_lines[node_id] = line
            self.s.nodes.append(NodeDecl(node_id, kind, kv.get("vlan", "default"), kv.get("partition", "default")))
        elif key == "link":
            if len(tokens) != 2:
                raise ParseError("link takes exactly two node ids", line)
            for t in tokens:
                self.ref(t, line, "link")
            self.s.links.append((tokens[0], tokens[1]))
        elif key == "allow":
            if len(tokens) != 2:
                raise ParseError("allow takes a source and a destination VLAN", line)
            self.s.vlan_allow.append((tokens[0], tokens[1]))
        else:
            raise ParseError(f"unknown [topology] key {key!r}", line)

    def _hosts(self, key: str, value: str, line: int) -> None:
        tokens = value.split()
        if not tokens:
            raise ParseError(f"{key} needs an argument", line)
        if key == "weight":
            if len(tokens) != 2:
                raise ParseError("weight takes a tag and an integer", line)
            self.s.weights[tokens[0]] = _int(tokens[1], "weight", line)
            return
        if key == "device":
            kv = _split_kv(tokens[1:], line)
            dev = DeviceDecl(tokens[0])
            if "credential" in kv:
                dev.credential = _hex(kv.pop("credential"), line)
            if "files" in kv:
                dev.files = _sizes(kv.pop("files"), line)
            if kv:
                raise ParseError(f"unknown device attributes {sorted(kv)}", line)
            self.s.devices[dev.id] = dev
            return
        if key != "host":
            raise ParseError(f"unknown [hosts] key {key!r}", line)
        host_id, kv = tokens[0], _split_kv(tokens[1:], line)
        self.ref(host_id, line, "host")
        h = HostDecl(host_id)
        for k, v in kv.items():
            if k == "tags":
                h.tags = tuple(t for t in v.split(",") if t)
            elif k == "files":
                h.files = _sizes(v, line)
            elif k in ("credentials", "disk", "capacity", "aslr_bits", "budget"):
                setattr(h, k, _int(v, k, line, 0))
            elif k in ("version", "community", "model"):
                setattr(h, k, v)
            elif k == "admin":
                user, sep, pw = v.partition(":")
                if not sep:
                    raise ParseError("admin is user:password", line)
                h.admin = (user, pw)
            else:
                raise ParseError(f"unknown host attribute {k!r}", line)
        if h.disk < 4000:
            raise ParseError("disk needs at least 4000 sectors", line)
        if not 0 <= h.aslr_bits <= 8:
            raise ParseError("aslr_bits must be within 0..8", line)
        self.s.hosts[host_id] = h

    def _defense(self, key: str, value: str, line: int) -> None:
        s = self.s
        if key == "all":
            on = _bool(value, line)
            for t in TOGGLES:
                s.defense[t] = on
        elif key in DEFENSE_FLAGS:
            s.defense[key] = _bool(value, line)
        elif key == "hardening":
            parts = tuple(p for p in value.split(",") if p)
            bad = set(parts) - {"bounds", "canary", "aslr"}
            if bad:
                raise ParseError(f"unknown hardening {sorted(bad)}", line)
            s.hardening = parts
        elif key == "scan_interval":
            s.scan_interval = _int(value, key, line, 1)
        elif key == "snmp_threshold":
            s.snmp_threshold = _int(value, key, line, 1)
        elif key == "safelist":
            s.safelist.append(value.strip())
        elif key == "vendor_key":
            s.vendor_key = _hex(value, line)
        else:
            raise ParseError(f"unknown [defense] key {key!r}", line)

    def _attacker(self, key: str, value: str, line: int) -> None:
        s = self.s
        if key == "c2":
            s.c2 = value.strip()
            self.ref(s.c2, line, "c2")
        elif key == "threshold":
            s.threshold = _int(value, key, line)
        elif key == "salted_kdf":
            s.salted_kdf = _bool(value, line)
        elif key == "hook":
            s.hook = value.strip()
        elif key == "goal":
            tokens = value.split()
            if len(tokens) < 2:
                raise ParseError("goal is VERB TARGET [k=v ...]", line)
            verb, target = tokens[0], tokens[1]
            if verb not in GOAL_VERBS:
                raise ParseError(f"unknown goal verb {verb!r}", line)
            goal = Goal(verb, target, _split_kv(tokens[2:], line), line)
            if verb not in ("interdict", "carry"):
                self.ref(target, line, f"goal {verb}")
            for k in ("pivot", "to"):
                if k in goal.params:
                    self.ref(goal.params[k], line, f"goal {verb} {k}")
            s.goals.append(goal)
        elif key == "fail":
            target, sep, idx = value.strip().partition(":")
            if not sep:
                raise ParseError("fail is TARGET:STAGE_INDEX", line)
            self.ref(target, line, "fail")
            s.failures[target] = _int(idx, "stage index", line, 1)
        else:
            raise ParseError(f"unknown [attacker] key {key!r}", line)

    def _shipments(self, key: str, value: str, line: int) -> None:
        if key != "shipment":
            raise ParseError(f"unknown [shipments] key {key!r}", line)
        tokens = value.split()
        if not tokens:
            raise ParseError("shipment needs a name", line)
        kv = _split_kv(tokens[1:], line)
        if "dest" not in kv or "arrival" not in kv:
            raise ParseError("shipment needs dest= and arrival=", line)
        self.ref(kv["dest"], line, "shipment dest")
        self.s.shipments.append(
            ShipmentDecl(tokens[0], kv["dest"], _int(kv["arrival"], "arrival", line, 0), _sizes(kv.get("files", ""), line))
        )

    def _activity(self, key: str, value: str, line: int) -> None:
        if key != "at":
            raise ParseError(f"unknown [activity] key {key!r}", line)
        tokens = value.split()
        if not tokens:
            raise ParseError("at needs a tick", line)
        kv = _split_kv(tokens[1:], line)
        verb, target = kv.pop("verb", ""), kv.pop("target", "")
        if verb not in ACTIVITY_VERBS:
            raise ParseError(f"unknown activity verb {verb!r}", line)
        self.ref(target, line, f"activity {verb}")
        self.s.activities.append(Activity(_int(tokens[0], "tick", line, 0), verb, target, kv))

    def finish(self) -> Scenario:
        s = self.s
        declared = {n.id for n in s.nodes}
        for node, line, context in self.refs:
            if node not in declared:
                raise UnknownReference(f"{context} references undeclared node {node!r}", line)
        if not s.c2:
            c2s = [n.id for n in s.nodes if n.kind is HostKind.C2_SERVER]
            s.c2 = c2s[0] if c2s else ""
        if s.goals and not s.c2:
            raise ParseError("attacker goals need a C2Server node")
        ships = {sh.name for sh in s.shipments}
        for goal in s.goals:
            if goal.verb in ("interdict", "carry") and goal.target not in ships:
                raise UnknownReference(f"goal {goal.verb} references undeclared shipment {goal.target!r}", goal.line)
            if goal.verb == "carry" and "to" not in goal.params:
                raise ParseError("carry needs to=HOST", goal.line)
        for dev in s.safelist:
            if dev not in s.devices:
                raise UnknownReference(f"safelist references undeclared device {dev!r}")
        for act in s.activities:
            if act.verb == "usb" and act.args.get("device") not in s.devices:
                raise UnknownReference(f"usb activity references undeclared device {act.args.get('device')!r}")
        for n in s.nodes:
            if n.kind is HostKind.SANDBOX and (n.id not in s.hosts or s.hosts[n.id].budget is None):
                raise ParseError(f"sandbox node {n.id!r} needs a host entry with budget=")
            if n.id in s.hosts and s.hosts[n.id].budget is not None and n.kind is not HostKind.SANDBOX:
                raise ParseError(f"budget= is only meaningful for sandbox nodes ({n.id!r})")
        s.activities.sort(key=lambda a: a.tick)
        return s


def parse(text: str) -> Scenario:
    p = _Parser()
    section = None
    seen_entry = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or line[1:-1] not in SECTIONS:
                raise ParseError(f"unknown section {line!r}", lineno)
            section = line[1:-1]
            continue
        if section is None:
            raise ParseError("entry before any [section]", lineno)
        key, sep, value = line.partition("=")
        if not sep:
            raise ParseError(f"expected 'key = value', got {line!r}", lineno)
        p.entry(section, key.strip(), value.strip(), lineno)
        seen_entry = True
    if not seen_entry:
        raise ParseError("scenario is empty", 1)
    if not p.s.nodes:
        raise ParseError("scenario declares no nodes")
    return p.finish()


def load(source: str | Path) -> Scenario:
    """Load from a path, or parse ``source`` directly when it is scenario text."""
    if isinstance(source, Path) or ("\n" not in source and Path(source).suffix == ".scn"):
        return parse(Path(source).read_text())
    return parse(source)


def canonical_path(name: str = "canonical") -> Path:
    return Path(__file__).parent / "scenarios" / f"{name}.scn"


def canonical(name: str = "canonical") -> Scenario:
    return load(canonical_path(name))


# -- world construction ------------------------------------------------------------

def _blob(seed: int, label: str, size: int) -> bytes:
    return random.Random(f"{seed}:{label}").randbytes(size)


def build_policy(s: Scenario) -> DefensePolicy:
    flags = {t: s.defense.get(t, False) for t in DEFENSE_FLAGS}
    vlan = VlanPolicy()
    for a, b in s.vlan_allow:
        vlan.allow(a, b)
    return DefensePolicy(
        vlan_policy=vlan,
        hardening=ParserHardening("bounds" in s.hardening, "canary" in s.hardening, "aslr" in s.hardening),
        usb_safelist={d: credential_digest(s.devices[d].credential) for d in s.safelist},
        vendor_key=s.vendor_key or sha256(f"vendor:{s.name}".encode()),
        scan_interval=s.scan_interval,
        snmp_bruteforce_threshold=s.snmp_threshold,
        **flags,
    )


def build_host(s: Scenario, node: NodeDecl, seed: int, vendor_key: bytes) -> Host:
    decl = s.hosts.get(node.id) or HostDecl(node.id)
    firmware = hostmodel.default_firmware(decl.version, seed)
    firmware.auth_tag = firmware_tag(vendor_key, firmware.segments)
    return Host(
        node.id,
        node.kind,
        hostmodel.default_disk(decl.disk, random.Random(f"{seed}:disk:{node.id}")),
        firmware,
        snmp=SnmpAgent(enabled=node.kind is HostKind.FIREWALL, community=decl.community, model=decl.model),
        hardening=ParserHardening(buffer_capacity=decl.capacity, aslr_entropy_bits=decl.aslr_bits),
        session_budget=decl.budget,
        admin_credentials=decl.admin,
        files={n: _blob(seed, f"file:{node.id}:{n}", size) for n, size in decl.files.items()},
        tags=decl.tags,
        credentials=[_blob(seed, f"cred:{node.id}:{i}", 48) for i in range(decl.credentials)],
        seed=seed,
    )


def build_world(s: Scenario, seed: int | None = None, log_: EventLog | None = None) -> tuple[World, Campaign | None]:
    seed = s.seed if seed is None else seed
    topo = Topology()
    for n in s.nodes:
        topo.add_node(n.id, n.vlan, n.partition)
    for a, b in s.links:
        topo.link(a, b)
    policy = build_policy(s)
    hosts = {n.id: build_host(s, n, seed, policy.vendor_key) for n in s.nodes}
    world = World(topo, hosts, policy, seed=seed, max_ticks=s.max_ticks, log=log_)
    for d in s.devices.values():
        world.devices[d.id] = UsbDevice(
            d.id, {n: _blob(seed, f"dev:{d.id}:{n}", size) for n, size in d.files.items()}, device_credential=d.credential
        )
    for sh in s.shipments:
        files = {n: _blob(seed, f"ship:{sh.name}:{n}", size) for n, size in sh.files.items()}
        device = UsbDevice(f"media-{sh.name}", dict(files))
        world.shipments[sh.name] = Shipment(sh.name, sh.dest, device, sh.arrival, files)
    world.activities = [Activity(a.tick, a.verb, a.target, dict(a.args)) for a in s.activities]
    campaign = None
    if s.c2:
        campaign = Campaign(world, s.c2, threshold=s.threshold, weights=s.weights, salted_kdf=s.salted_kdf, hook_function=s.hook)
    return world, campaign


# -- attacker program ------------------------------------------------------------

class _Runner:
    def __init__(self, s: Scenario, world: World, campaign: Campaign):
        self.s = s
        self.world = world
        self.c = campaign

    def step(self, fn: Callable, *args, **kwargs) -> tuple[bool, object]:
        """Run one attacker action then let one tick pass. Failures are outcomes."""
        try:
            result = fn(*args, **kwargs)
            ok = True
        except ShadowRangeError as exc:
            log.debug("%s failed: %s", getattr(fn, "__name__", fn), exc)
            result, ok = None, False
        self.world.tick()
        return ok, result

    def execute(self, goal: Goal) -> None:
        getattr(self, f"_goal_{goal.verb}")(goal)

    def _goal_firewall(self, g: Goal) -> None:
        c, t = self.c, g.target
        ok, _ = self.step(c.extrabacon, t, g.list("guesses", ["public"]))
        if not ok:
            return
        ok, v = self.step(c.validate_target, t)
        if not ok or not v.validated:
            return
        creds = tuple(g.get("creds").split(":", 1)) if ":" in g.get("creds") else None
        ok, out = self.step(c.epicbanana, t, g.get("transport", "SshLike"), creds, g.get("version"))
        if not ok or not out.success:
            return
        ok, _ = self.step(c.banalride_handshake, t)
        if not ok:
            return
        ok, _ = self.step(c.deploy_banaglee, t)
        if not ok:
            return
        if g.get("persist", "jetplow") == "jetplow":
            self.step(c.install_jetplow, t)
        if g.flag("collect", True):
            ok, _ = self.step(c.collect, t)
            if ok and g.flag("exfil", True):
                self.step(c.exfiltrate, t)

    def _payload(self, target: str, index: int, label: str) -> StagePayload:
        return StagePayload(index, f"stage{index}:{label}:{target}:".encode() + _blob(self.world.seed, f"payload:{target}:{index}", 64))

    def _report(self, target: str, index: int, passed: bool) -> bool:
        injected = self.s.failures.get(target) == index
        self.c.report_stage(target, index, passed and not injected, "injected" if injected and passed else "")
        self.world.tick()
        return passed and not injected

    def _goal_platform(self, g: Goal) -> None:
        c, t = self.c, g.target
        ok, _ = self.step(c.lateral_move, g.get("pivot", self.s.c2), t, self._payload(t, 1, "validator"))
        if not ok:
            return
        ok, v = self.step(c.validate_target, t)
        if not self._report(t, 1, ok and v.validated):
            return
        ok, _ = self.step(c.next_stage, t, self._payload(t, 2, "loader"))
        if not ok:
            return
        ok, _ = self.step(c.run_loader, t)
        probe_ok, probe = self.step(c.sandbox_probe, t, int(g.get("delay", "0"))) if ok else (False, None)
        if not self._report(t, 2, ok and probe_ok and probe.executed):
            return
        ok, _ = self.step(c.next_stage, t, self._payload(t, 3, "dropper"))
        if not ok:
            return
        ok, _ = self.step(c.run_dropper, t)
        if not self._report(t, 3, ok):
            return
        ok, _ = self.step(c.deploy_platform, t, ImplantKind(g.get("kind", "EquationDrug")))
        if not ok:
            return
        if g.flag("flasher"):
            self.step(c.flasher_implant, t)
        if not self._report(t, 4, True):
            return
        if g.flag("collect", True):
            ok, _ = self.step(c.collect, t)
            if ok and g.flag("exfil", True):
                self.step(c.exfiltrate, t)

    def _goal_interdict(self, g: Goal) -> None:
        commands = [cmd.encode() for cmd in g.list("commands", ["hostname", "netmap"])]
        trojan = attackchain.fanny_build_usb(UsbDevice(f"fanny-{g.target}"), commands)
        self.step(self.c.interdict_media, g.target, trojan)

    def _goal_carry(self, g: Goal) -> None:
        world = self.world
        ship = world.shipments[g.target]
        world.advance_to(ship.arrival + 1)
        world.advance_to(ship.arrival + int(g.get("after", "1")))
        device = ship.device
        dest = world.host(ship.dest)
        if any(d is device for d in dest.usb_ports):
            world.remove_usb(ship.dest, device)
        world.tick()
        to = g.get("to")
        try:
            state = world.insert_usb(to, device)
        except ShadowRangeError:
            world.tick()
            return
        world.tick()
        if state.admitted:
            world.remove_usb(to, device)


def init_record(s: Scenario, seed: int, log_: EventLog) -> Record:
    return log_.append(
        0,
        "Init",
        version=LOG_VERSION,
        scenario=s.name,
        seed=seed,
        defenses=[t for t in DEFENSE_FLAGS if s.defense.get(t)],
        nodes=[f"{n.id}:{n.kind.value}:{n.vlan}:{n.partition}" for n in s.nodes],
    )


def simulate(s: Scenario, seed: int | None = None) -> EventLog:
    seed = s.seed if seed is None else seed
    log_ = EventLog()
    init_record(s, seed, log_)
    if s.max_ticks == 0:
        return log_
    world, campaign = build_world(s, seed, log_)
    try:
        if campaign is not None:
            runner = _Runner(s, world, campaign)
            for goal in s.goals:
                runner.execute(goal)
        while world.pending_environment() or world.topology.pending:
            world.tick()
        scan = world.next_scan_tick()
        if scan is not None:
            world.advance_to(scan)
    except OutOfTime:
        log_.append(world.clock, "Halt", reason="OutOfTime")
    return log_


def run(s: Scenario, seed: int | None = None) -> tuple[EventLog, "RunReport"]:
    log_ = simulate(s, seed)
    return log_, score(log_)


# -- scoring -----------------------------------------------------------------------

@dataclass(frozen=True)
class StageOutcome:
    target: str
    stage: str
    outcome: str  # achieved | blocked | failed
    tick: int
    technique: str
    by: str = "-"


@dataclass(frozen=True)
class DetectionSummary:
    tick: int
    detector: str
    host: str
    stage: str
    technique: str
    details: str


@dataclass
class RunReport:
    scenario: str = ""
    seed: str = ""
    outcomes: list[StageOutcome] = field(default_factory=list)
    detections: list[DetectionSummary] = field(default_factory=list)
    time_to_detection: dict[str, int] = field(default_factory=dict)
    exfiltrated_bytes: int = 0
    verdict: str = "Contained"
    empty: bool = False

    def achieved(self, target: str | None = None) -> set[tuple[str, str]]:
        return {
            (o.target, o.stage) for o in self.outcomes
            if o.outcome == "achieved" and (target is None or o.target == target)
        }

    def stages_of(self, target: str) -> list[str]:
        return [st.value for st in STAGES if (target, st.value) in self.achieved(target)]

    def outcome(self, target: str, stage: str) -> StageOutcome | None:
        return next((o for o in self.outcomes if o.target == target and o.stage == stage), None)

    def to_kv(self) -> str:
        if self.empty:
            return ""
        lines = [
            _kv("report", version=LOG_VERSION, scenario=self.scenario, seed=self.seed),
            _kv("verdict", value=self.verdict),
            _kv("exfiltrated", bytes=self.exfiltrated_bytes),
        ]
        for o in self.outcomes:
            lines.append(_kv("stage", target=o.target, stage=o.stage, outcome=o.outcome, tick=o.tick, technique=o.technique, by=o.by))
        for d in self.detections:
            lines.append(_kv("detection", tick=d.tick, detector=d.detector, host=d.host, stage=d.stage, technique=d.technique, details=d.details))
        for stage, ticks in self.time_to_detection.items():
            lines.append(_kv("ttd", stage=stage, ticks=ticks))
        return "".join(line + "\n" for line in lines)

    def to_text(self) -> str:
        if self.empty:
            return ""
        out = [f"Scenario {self.scenario} (seed {self.seed})", f"Verdict: {self.verdict}", f"Exfiltrated: {self.exfiltrated_bytes} bytes", ""]
        targets = sorted({o.target for o in self.outcomes})
        for t in targets:
            out.append(f"Target {t}")
            for o in self.outcomes:
                if o.target == t:
                    extra = f" by {o.by}" if o.by != "-" else ""
                    out.append(f"  {o.stage:<12} {o.outcome:<9} tick {o.tick:<5} via {o.technique}{extra}")
        out.append("")
        out.append(f"Detections ({len(self.detections)})")
        for d in self.detections:
            out.append(f"  tick {d.tick:<5} {d.detector:<15} {d.host:<8} {d.stage:<11} {d.technique}: {d.details}")
        if self.time_to_detection:
            out.append("")
            out.append("Time to detection")
            for stage, ticks in self.time_to_detection.items():
                out.append(f"  {stage:<12} {ticks} ticks")
        return "\n".join(out) + "\n"


def _kv(record: str, /, **fields) -> str:
    return " ".join([record] + [f"{k}={encode_value(v)}" for k, v in fields.items()])


def score(log_: EventLog) -> RunReport:
    """Pure function of the log."""
    if not len(log_):
        return RunReport(empty=True)
    init = log_.records[0]
    if init.kind != "Init":
        raise CorruptLog("first record is not Init")
    report = RunReport(scenario=init.get("scenario", ""), seed=init.get("seed", ""))
    order = {st.value: i for i, st in enumerate(STAGES)}
    first: dict[tuple[str, str, str], Record] = {}
    attempts: dict[tuple[str, str], Record] = {}
    stage_attempt: dict[str, int] = {}
    for rec in log_:
        if rec.kind in ("StageAchieved", "StageBlocked", "StageFailed"):
            first.setdefault((rec["target"], rec["stage"], rec.kind), rec)
        elif rec.kind == "StageAttempt":
            attempts.setdefault((rec["target"], rec["stage"]), rec)
            stage_attempt.setdefault(rec["stage"], rec.tick)
        elif rec.kind == "Exfiltrated":
            report.exfiltrated_bytes += int(rec["bytes"])
        elif rec.kind == "Detection":
            report.detections.append(
                DetectionSummary(rec.tick, rec["detector"], rec["host"], rec.get("stage", "-"), rec.get("technique", "-"), rec.get("details", ""))
            )
    keys = sorted({(t, st) for t, st, _ in first} | set(attempts), key=lambda k: (k[0], order.get(k[1], 99)))
    for target, stage in keys:
        for kind, label in (("StageAchieved", "achieved"), ("StageBlocked", "blocked"), ("StageFailed", "failed")):
            rec = first.get((target, stage, kind))
            if rec is not None:
                report.outcomes.append(StageOutcome(target, stage, label, rec.tick, rec.get("technique", "-"), rec.get("by", "-")))
                break
        else:
            rec = attempts[(target, stage)]
            report.outcomes.append(StageOutcome(target, stage, "failed", rec.tick, rec.get("technique", "-")))
    for st in STAGES:
        start = stage_attempt.get(st.value)
        if start is None:
            continue
        hits = [d.tick for d in report.detections if d.stage == st.value and d.tick >= start]
        if hits:
            report.time_to_detection[st.value] = min(hits) - start
    per_target: dict[str, set[str]] = {}
    for o in report.outcomes:
        if o.outcome == "achieved":
            per_target.setdefault(o.target, set()).add(o.stage)
    if not any("Implanted" in stages for stages in per_target.values()):
        report.verdict = "Contained"
    elif any(len(stages) == len(STAGES) for stages in per_target.values()):
        report.verdict = "FullCompromise"
    else:
        report.verdict = "PartialCompromise"
    return report


def replay(log_: EventLog | str) -> RunReport:
    if isinstance(log_, str):
        log_ = EventLog.from_text(log_)
    if len(log_):
        version = log_.records[0].get("version")
        if version != LOG_VERSION:
            raise VersionMismatch(f"log version {version!r}, this build reads {LOG_VERSION!r}")
    return score(log_)


# -- audits ------------------------------------------------------------------------

def node_table(log_: EventLog) -> dict[str, tuple[str, str, str]]:
    """node id -> (kind, vlan, partition) from the Init record."""
    if not len(log_):
        return {}
    out = {}
    for entry in filter(None, log_.records[0].get("nodes", "").split(",")):
        node, kind, vlan, partition = entry.split(":")
        out[node] = (kind, vlan, partition)
    return out


def world_node_table(world: World) -> dict[str, tuple[str, str, str]]:
    """Same shape as :func:`node_table`, for worlds driven without a run loop."""
    return {
        n: (world.hosts[n].kind.value if n in world.hosts else "", info.vlan, info.partition)
        for n, info in world.topology.nodes.items()
    }


def lineage_audit(log_: EventLog, nodes: dict[str, tuple[str, str, str]] | None = None) -> list[str]:
    """Return violations of the air-gap rules; an empty list means the log is clean.

    No delivered datagram may cross partitions, and every exfiltration whose
    origin sits outside the command server's partition must carry exactly the
    bytes of an earlier hidden-store write made on that origin. ``nodes``
    defaults to the table in the log's Init record.
    """
    if nodes is None:
        nodes = node_table(log_)
    c2_parts = {p for kind, _, p in nodes.values() if kind == HostKind.C2_SERVER.value}
    problems = []
    stores: dict[tuple[str, str], set[str]] = {}
    for rec in log_:
        named = [rec[k] for k in ("src", "dst") if rec.kind == "Delivered"]
        named += rec["target"].split(",") if rec.kind == "Exfiltrated" else []
        unknown = [n for n in named if n not in nodes]
        if unknown:
            problems.append(f"seq {rec.seq}: {rec.kind} names undeclared node(s) {unknown}")
            continue
        if rec.kind == "Delivered":
            if nodes[rec["src"]][2] != nodes[rec["dst"]][2]:
                problems.append(f"seq {rec.seq}: datagram {rec['src']}->{rec['dst']} crossed an air gap")
        elif rec.kind == "HiddenStoreWrite":
            stores.setdefault((rec["host"], rec["device"]), set()).add(rec["sha256"])
        elif rec.kind == "Exfiltrated":
            for origin in rec["target"].split(","):
                if nodes[origin][2] in c2_parts:
                    continue
                if rec.get("plain_sha256") not in stores.get((origin, rec.get("device", "-")), set()):
                    problems.append(f"seq {rec.seq}: bytes from air-gapped {origin} lack a hidden-store record")
    return problems


def blocking_matrix(scenario: Scenario | None = None) -> dict[str, dict[str, bool]]:
    """defense toggle -> technique column -> blocked or detected, one run per toggle."""
    base = scenario or canonical()
    matrix = {}
    for toggle in TOGGLES:
        s = base.with_defenses(**{t: t == toggle for t in TOGGLES})
        matrix[toggle] = column_hits(simulate(s))
    return matrix


# technique column -> techniques that count for it
MATRIX_COLUMNS = {
    "fanny_delivery": ("fanny_delivery",),
    "epicbanana": ("epicbanana",),
    "firmware_persistence": ("jetplow", "flasher", "firmware_persistence"),
    "grayfish_bootkit": ("grayfish_bootkit",),
    "c2_signature": ("banalride", "snmp_bruteforce"),
    "lateral_movement": ("lateral_movement",),
}
PAIRING = dict(zip(TOGGLES, MATRIX_COLUMNS))


def column_hits(log_: EventLog) -> dict[str, bool]:
    seen = {r.get("technique") for r in log_ if r.kind in ("Detection", "StageBlocked")}
    return {col: any(t in seen for t in techs) for col, techs in MATRIX_COLUMNS.items()}
