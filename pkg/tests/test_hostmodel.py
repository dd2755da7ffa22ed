from __future__ import annotations

import random

import pytest

from shadowrange import hostmodel
from shadowrange.disk import PartitionEntry, Provenance
from shadowrange.errors import AuthFail, AuthRequired, NoBootablePartition, NoFreePort, NotFound, Unreachable
from shadowrange.hostmodel import (
    BootEvent,
    CliOutcome,
    Host,
    HostKind,
    ParserHardening,
    Session,
    SnmpAgent,
    SnmpRequest,
    UsbDevice,
)

CLEAN_TRACE = [
    BootEvent.BIOS,
    BootEvent.MBR_EXEC,
    BootEvent.PT_SCAN,
    BootEvent.VBR_EXEC,
    BootEvent.BOOTLOADER_EXEC,
    BootEvent.KERNEL_EXEC,
]


def make_host(kind=HostKind.WORKSTATION, **kw) -> Host:
    kw.setdefault("session_budget", 5 if kind is HostKind.SANDBOX else None)
    return Host(
        "h",
        kind,
        hostmodel.default_disk(4096, random.Random(1)),
        hostmodel.default_firmware("v1"),
        **kw,
    )


def firewall(**kw) -> Host:
    return make_host(HostKind.FIREWALL, snmp=SnmpAgent(True, "s3cr3t", model="ASA"), **kw)


def test_clean_boot_trace_and_kernel_table():
    h = make_host()
    assert hostmodel.boot(h) == CLEAN_TRACE
    assert h.booted and len(h.kernel_table.entries) == len(hostmodel.KERNEL_FUNCTIONS)
    assert hostmodel.lookup_process_by_id(h, 4).name == "System"


def test_attacker_mbr_adds_bootkit_exec():
    h = make_host()
    h.write_sectors(0, b"GFLD", Provenance.ATTACKER_WRITE)
    trace = hostmodel.boot(h)
    assert trace[:3] == [BootEvent.BIOS, BootEvent.MBR_EXEC, BootEvent.BOOTKIT_EXEC]
    assert trace[-1] is BootEvent.KERNEL_EXEC


def test_failing_bootkit_handler_ends_in_self_destruct():
    class Refuses:
        def startup(self, host):
            return False

        def after_kernel(self, host):  # pragma: no cover - never reached
            raise AssertionError

    h = make_host(bootkit_handler=Refuses())
    h.write_sectors(0, b"GFLD", Provenance.ATTACKER_WRITE)
    assert hostmodel.boot(h)[-1] is BootEvent.SELF_DESTRUCT
    assert not h.booted


def test_no_bootable_partition():
    from shadowrange.disk import DiskImage

    disk = DiskImage.create(64, [PartitionEntry(8, 16)], rng=random.Random(0))
    h = Host("x", HostKind.WORKSTATION, disk, hostmodel.default_firmware("v1"))
    with pytest.raises(NoBootablePartition):
        hostmodel.boot(h)


def test_snmp_info_and_auth_mode():
    h = firewall()
    assert hostmodel.snmp_handle(h, SnmpRequest("s3cr3t", "Info")).value == "ASA v1"
    with pytest.raises(AuthFail):
        hostmodel.snmp_handle(h, SnmpRequest("public", "Info"))
    assert h.snmp.failed_attempts == 1
    hostmodel.snmp_handle(h, SnmpRequest("s3cr3t", "SetAuthMode", "pass-disabled"))
    assert not h.snmp.auth_required


def test_snmp_disabled_unreachable():
    with pytest.raises(Unreachable):
        hostmodel.snmp_handle(make_host(), SnmpRequest("public", "Info"))


def test_snmp_request_codec():
    r = SnmpRequest("c", "SetAuthMode", "pass-disabled")
    assert SnmpRequest.decode(r.encode()) == r


def test_firewall_cli_needs_credentials_until_auth_disabled():
    h = firewall(admin_credentials=("admin", "pw"))
    hostmodel.boot(h)
    with pytest.raises(AuthRequired):
        hostmodel.cli_handle(h, Session(), b"show version")
    assert hostmodel.cli_handle(h, Session(credentials=("admin", "pw")), b"show version") is CliOutcome.NORMAL_EXEC
    h.snmp.auth_required = False
    assert hostmodel.cli_handle(h, Session(), b"show version") is CliOutcome.NORMAL_EXEC


@pytest.mark.parametrize(
    "hardening, expected",
    [
        (ParserHardening(), CliOutcome.CODE_EXEC),
        (ParserHardening(bounds_checking=True), CliOutcome.REJECTED),
        (ParserHardening(stack_canary=True), CliOutcome.CRASH_DETECTED),
        (ParserHardening(bounds_checking=True, stack_canary=True), CliOutcome.REJECTED),
    ],
)
def test_cli_overflow_outcomes(hardening, expected):
    h = make_host(hardening=hardening)
    hostmodel.boot(h)
    canaries = []
    payload = hostmodel.build_overflow(128, "v1")
    assert hostmodel.cli_handle(h, Session(), payload, canaries.append) is expected
    assert bool(canaries) == (expected is CliOutcome.CRASH_DETECTED)


def test_cli_version_mismatch_crashes():
    h = make_host()
    hostmodel.boot(h)
    assert hostmodel.cli_handle(h, Session(), hostmodel.build_overflow(128, "v2")) is CliOutcome.CRASH


def test_cli_aslr_needs_the_right_guess():
    h = make_host(hardening=ParserHardening(aslr=True, aslr_entropy_bits=4))
    hostmodel.boot(h)
    outcomes = {g: hostmodel.cli_handle(h, Session(), hostmodel.build_overflow(128, "v1", g)) for g in range(16)}
    assert [g for g, o in outcomes.items() if o is CliOutcome.CODE_EXEC] == [h.aslr_slide]


def test_short_input_is_normal():
    h = make_host()
    assert hostmodel.cli_handle(h, Session(), b"x" * 128) is CliOutcome.NORMAL_EXEC


def test_vendor_update_keeps_other_segments():
    h = make_host()
    h.firmware.segments[2] = b"JETPLOW\x00implant"
    hostmodel.apply_vendor_update(h, {0: b"new0", 1: b"new1"}, b"t" * 32, new_version="v2")
    assert h.firmware.segments[2] == b"JETPLOW\x00implant"
    assert h.firmware.version == "v2"
    assert h.firmware.provenance[0] is Provenance.VENDOR_UPDATE


def test_firmware_write_undo():
    h = make_host()
    before = h.firmware.copy()
    undo = hostmodel.write_firmware(h, {1: b"x", 7: b"y"}, Provenance.ATTACKER_WRITE, new_tag=b"z" * 32)
    for rec in reversed(undo):
        hostmodel.undo_firmware(h, rec)
    assert h.firmware.segments == before.segments and h.firmware.auth_tag == before.auth_tag


def test_firmware_verifier_can_reject():
    from shadowrange.errors import AuthRejected

    h = make_host()
    with pytest.raises(AuthRejected):
        hostmodel.write_firmware(h, {0: b"x"}, Provenance.ATTACKER_WRITE, verify=lambda host, img: False)
    assert h.firmware.segments[0] != b"x"


def test_reimage_restores_partitions_and_changes_object_id():
    h = make_host()
    hostmodel.boot(h)
    old_id = h.bootable_object_id
    region = h.disk.dark_regions()[1]
    h.write_sectors(region.start_lba, b"hidden", Provenance.ATTACKER_WRITE)
    h.write_sectors(200, b"in partition", Provenance.ATTACKER_WRITE)
    h.write_sectors(0, b"stub", Provenance.ATTACKER_WRITE)
    h.files["dropped.exe"] = b"MZ"
    hostmodel.reimage_os(h)
    assert h.bootable_object_id != old_id
    assert h.disk.provenance[200] == 0 and h.disk.provenance[0] == 0
    assert h.disk.provenance[region.start_lba] == Provenance.ATTACKER_WRITE, "dark regions survive a reimage"
    assert "dropped.exe" not in h.files and not h.booted


def test_reimage_without_mbr_reset_keeps_stub():
    h = make_host()
    h.write_sectors(0, b"stub", Provenance.ATTACKER_WRITE)
    hostmodel.reimage_os(h, reset_mbr=False)
    assert h.disk.provenance[0] == Provenance.ATTACKER_WRITE


def test_usb_insert_and_remove():
    h = make_host()
    hostmodel.boot(h)
    dev = UsbDevice("d", {"b.txt": b"", "a.txt": b""}, bytearray(b"hidden"), autorun="fanny")
    assert dev.listing() == ["a.txt", "b.txt"]
    state = hostmodel.insert_usb(h, dev)
    assert state.admitted and state.autorun_scheduled and state.port == 0
    hostmodel.insert_usb(h, UsbDevice("e"))
    with pytest.raises(NoFreePort):
        hostmodel.insert_usb(h, UsbDevice("f"))
    hostmodel.remove_usb(h, 0)
    assert h.usb_ports[0] is None


def test_usb_gate_refusal_leaves_port_empty():
    h = make_host()
    state = hostmodel.insert_usb(h, UsbDevice("d"), gate=lambda host, dev: False)
    assert not state.admitted and h.usb_ports == [None, None]


def test_process_lookup():
    h = make_host()
    with pytest.raises(NotFound):
        hostmodel.lookup_process_by_id(h, 4)
    hostmodel.boot(h)
    assert hostmodel.lookup_process_by_id(h, 0).name == "Idle"
    rec = h.spawn("x.exe")
    assert rec.pid == 1000 and h.spawn("y.exe").pid == 1004
    h.kill(rec.pid)
    with pytest.raises(NotFound):
        hostmodel.lookup_process_by_id(h, 1000)


def test_sandbox_budget_only_for_sandboxes():
    with pytest.raises(ValueError):
        make_host(HostKind.WORKSTATION, session_budget=3)
    with pytest.raises(ValueError):
        make_host(HostKind.SANDBOX, session_budget=None)


def test_census_changes_with_every_kind_of_state():
    h = make_host()
    hostmodel.boot(h)
    base = h.census()
    h.files["x"] = b"1"
    assert h.census() != base
    del h.files["x"]
    assert h.census() == base
    pid = h.spawn("p").pid
    assert h.census() != base
    h.kill(pid)
    h.drivers.add("d.sys")
    assert h.census() != base
    h.drivers.clear()
    assert h.census() == base


def test_default_disk_layout():
    with pytest.raises(ValueError):
        hostmodel.default_disk(3000)
    kinds = [r.kind.value for r in hostmodel.default_disk().dark_regions()]
    assert kinds == ["MbrGap", "InterPartitionGap", "TailGap"]


def test_remove_from_empty_port():
    from shadowrange.errors import EmptyPort

    with pytest.raises(EmptyPort):
        hostmodel.remove_usb(make_host(), 0)


def test_reimage_of_pristine_host_keeps_census():
    h = make_host()
    hostmodel.boot(h)
    before = h.census()
    hostmodel.reimage_os(h)
    hostmodel.boot(h)
    after = h.census()
    assert (after.disk, after.firmware, after.kernel) == (before.disk, before.firmware, before.kernel)


def test_full_update_overwrites_implant_segment():
    h = make_host()
    h.firmware.segments[2] = b"JETPLOW\x00implant"
    hostmodel.apply_vendor_update(h, {i: b"v" for i in range(3)}, b"t" * 32)
    assert not any(b.startswith(b"JETPLOW") for b in h.firmware.segments.values())


def test_pristine_kernel_snapshot_taken_once():
    h = make_host()
    hostmodel.boot(h)
    pristine = dict(h.kernel_table.pristine)
    h.kernel_table.pristine[next(iter(pristine))] = 0
    hostmodel.boot(h)
    assert h.kernel_table.pristine != pristine, "second boot must not re-snapshot"
