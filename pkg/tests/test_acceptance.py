"""Acceptance criteria, each at its stated tolerance and time limit.

Every criterion prints one PASS/FAIL line (also collected into the terminal
summary). Timing covers the whole check, including the runs it needs.
"""

from __future__ import annotations

import contextlib
import hashlib
import io
import math
import random
import time

import pytest

from shadowrange import cli, cryptokit, disk, hostmodel, kernels
from shadowrange import scenario as sc
from shadowrange.attackchain import ImplantKind, Stage, Vfs
from shadowrange.cryptokit import ChannelState, open_sealed, seal
from shadowrange.defense import TOGGLES
from shadowrange.disk import PartitionEntry
from shadowrange.errors import ShadowRangeError, TagMismatch
from shadowrange.hostmodel import CliOutcome

from .conftest import ACCEPTANCE_LINES
from .helpers import make_world, own_firewall, payload, random_scenario

ALL_STAGES = [s.value for s in Stage]
# (log, node table) from every run below; the air-gap audit covers them all.
# Hand-driven worlds have no Init record, so their table comes from the world.
RUN_LOGS: list = []


@contextlib.contextmanager
def criterion(number: int, name: str, limit: float):
    start = time.perf_counter()
    ok = False
    try:
        yield
        ok = True
    finally:
        elapsed = time.perf_counter() - start
        within = elapsed < limit
        verdict = "PASS" if ok and within else "FAIL"
        line = f"criterion {number} {name}: {verdict} ({elapsed:.2f} s, limit {limit:g} s)"
        if ok and not within:
            line += " over time"
        ACCEPTANCE_LINES.append(line)
        print(line)
    assert within, f"criterion {number} took {elapsed:.2f} s, limit {limit} s"


def recorded_run(s: sc.Scenario, seed: int | None = None):
    log, report = sc.run(s, seed)
    RUN_LOGS.append((log, None))
    return log, report


# 1 ---------------------------------------------------------------------------------

def test_criterion_1_end_to_end_chain():
    with criterion(1, "end-to-end chain", 1.0):
        log, report = recorded_run(sc.canonical())
        assert report.verdict == "FullCompromise"
        assert report.stages_of("fw") == ALL_STAGES
        assert report.stages_of("ag1") == ALL_STAGES
        fw_order = [r["technique"] for r in log.of_kind("StageAchieved") if r["target"] == "fw"]
        firewall_path = ["extrabacon", "epicbanana", "banalride", "banaglee", "jetplow"]
        attempts = [r["technique"] for r in log.of_kind("StageAttempt") if r["target"] == "fw"]
        positions = [attempts.index(t) for t in firewall_path]
        assert positions == sorted(positions), attempts
        assert "jetplow" in fw_order and "epicbanana" in fw_order
        # air-gap path: interdiction, FANNY on the lab host, exfil through a connected host
        kinds = [r.kind for r in log]
        assert kinds.index("Interdicted") < kinds.index("HiddenStoreWrite")
        ag = {r["stage"]: r["technique"] for r in log.of_kind("StageAchieved") if r["target"] == "ag1"}
        assert ag["Implanted"] == "fanny" and ag["Exfiltrated"] == "fanny_usb"
        exfil = [r for r in log.of_kind("Exfiltrated") if "ag1" in r["target"].split(",")]
        assert exfil and exfil[0]["via"] != "ag1"


# 2 ---------------------------------------------------------------------------------

def test_criterion_2_blocking_matrix():
    with criterion(2, "blocking matrix", 5.0):
        base = sc.canonical()
        for toggle in TOGGLES:
            log, _ = recorded_run(base.with_defenses(**{t: t == toggle for t in TOGGLES}))
            row = sc.column_hits(log)
            assert row == {col: col == sc.PAIRING[toggle] for col in sc.MATRIX_COLUMNS}, (toggle, row)
        _, report = recorded_run(base.with_defenses(**{t: True for t in TOGGLES}))
        assert report.verdict == "Contained"


# 3 ---------------------------------------------------------------------------------

def test_criterion_3_determinism():
    with criterion(3, "determinism", 30.0):
        for i in range(50):
            s = random_scenario(random.Random(1000 + i))
            a, ra = recorded_run(s)
            b, rb = sc.run(s)
            assert a.to_text() == b.to_text(), s.seed
            assert ra.to_kv() == rb.to_kv() and ra.to_text() == rb.to_text()
        a, _ = sc.run(sc.canonical())
        b, _ = sc.run(sc.canonical())
        assert a.digest() == b.digest()


# 4 ---------------------------------------------------------------------------------

def test_criterion_4_crypto_suite():
    with criterion(4, f"crypto suite ({kernels.BACKEND} kernels)", 30.0):
        rng = random.Random(4)
        a = ChannelState(rng.randbytes(32), rng.randbytes(8))
        b = a.peer()
        for _ in range(10_000):
            msg = rng.randbytes(rng.randint(0, 65536))
            wire = seal(a, msg)
            assert len(wire) == len(msg) + cryptokit.SEAL_OVERHEAD
            assert open_sealed(b, wire) == msg

        group = cryptokit.DEFAULT_GROUP
        for _ in range(500):
            x, px = cryptokit.dh_keypair(group, rng)
            y, py = cryptokit.dh_keypair(group, rng)
            assert px == pow(group.g, x, group.p) and py == pow(group.g, y, group.p)
            oracle = hashlib.sha256(pow(group.g, x * y, group.p).to_bytes(16, "big")).digest()
            assert cryptokit.dh_shared(group, x, py) == cryptokit.dh_shared(group, y, px) == oracle

        calls = 0

        def counting(data: bytes) -> bytes:
            nonlocal calls
            calls += 1
            return hashlib.sha256(data).digest()

        cryptokit.grayfish_key(rng.randbytes(16), hash_fn=counting)
        assert calls == 1000

        true_id = rng.randbytes(16)
        vfs = Vfs(true_id)
        vfs.put("loot", b"stolen document body")
        failures = 0
        for _ in range(1000):
            wrong = rng.randbytes(16)
            if wrong == true_id:
                continue
            try:
                vfs.get("loot", wrong)
            except TagMismatch:
                failures += 1
        assert failures == 1000


# 5 ---------------------------------------------------------------------------------

def test_criterion_5_aslr_statistics():
    trials, p = 4096, 1 / 256
    sigma = math.sqrt(trials * p * (1 - p))
    low, high = trials * p - 3 * sigma, trials * p + 3 * sigma
    with criterion(5, "ASLR statistics", 10.0):
        world, c = make_world(defenses=("parser",), hardening=("aslr",), max_ticks=10 * trials)
        c.extrabacon("fw", ["s3cr3t"])
        assert c.validate_target("fw").validated
        successes = 0
        for _ in range(trials):
            world.reboot("fw")
            out = c.epicbanana("fw", target_version="asa804")
            assert out.cli in (CliOutcome.CODE_EXEC, CliOutcome.CRASH)
            successes += out.success
        RUN_LOGS.append((world.log, sc.world_node_table(world)))
        print(f"  ASLR: {successes}/{trials} successes, band [{low:.2f}, {high:.2f}]")
        assert low <= successes <= high


# 6 ---------------------------------------------------------------------------------

def workstation_steps(c, target: str, rng: random.Random):
    kind = rng.choice([ImplantKind.GRAYFISH, ImplantKind.EQUATION_DRUG])
    return [
        lambda: c.lateral_move("fw", target, payload(target, 1)),
        lambda: c.validate_target(target),
        lambda: c.report_stage(target, 1, True),
        lambda: c.next_stage(target, payload(target, 2)),
        lambda: c.run_loader(target),
        lambda: c.report_stage(target, 2, True),
        lambda: c.next_stage(target, payload(target, 3)),
        lambda: c.run_dropper(target),
        lambda: c.report_stage(target, 3, True),
        lambda: c.deploy_platform(target, kind),
        lambda: c.flasher_implant(target),
        lambda: c.hook_kernel(target, "PsLookupProcessByProcessId", 0xFFFFF800BEEF0000),
        lambda: c.world.reboot(target),
        lambda: c.collect(target),
    ]


def firewall_steps(c, rng: random.Random):
    return [
        lambda: c.extrabacon("fw", ["public", "s3cr3t"]),
        lambda: c.validate_target("fw"),
        lambda: c.epicbanana("fw", target_version="asa804"),
        lambda: c.banalride_handshake("fw"),
        lambda: c.deploy_banaglee("fw"),
        lambda: c.install_jetplow("fw"),
        lambda: c.world.reboot("fw"),
        lambda: c.collect("fw"),
    ]


def test_criterion_6_self_destruct_completeness():
    with criterion(6, "self-destruct completeness", 20.0):
        for i in range(100):
            rng = random.Random(600 + i)
            world, c = make_world(seed=rng.getrandbits(32), threshold=1)
            if i % 4 == 0:
                target, steps = "fw", firewall_steps(c, rng)
            else:
                own_firewall(c)
                target = rng.choice(["ws1", "ws2"])
                steps = workstation_steps(c, target, rng)
            for step in steps[: rng.randint(1, len(steps))]:
                try:
                    step()
                except ShadowRangeError:
                    pass
            RUN_LOGS.append((world.log, sc.world_node_table(world)))
            if target not in c.pre_census:
                continue
            c.report_stage(target, 99, False, "forced")  # forced failure -> abort
            assert world.host(target).census() == c.pre_census[target], (i, target)
            assert not c.state(target).active_implants


# 7 ---------------------------------------------------------------------------------

def test_criterion_7_air_gap_isolation():
    with criterion(7, "air-gap isolation", 5.0):
        if not RUN_LOGS:  # running this criterion on its own
            recorded_run(sc.canonical())
            for i in range(50):
                recorded_run(random_scenario(random.Random(1000 + i)))
        airgap_exfil = 0
        for log, table in RUN_LOGS:
            assert sc.lineage_audit(log, table) == []
            nodes = table or sc.node_table(log)
            airgap_exfil += sum(
                1 for r in log.of_kind("Exfiltrated")
                if any(nodes[o][2] == "airgap" for o in r["target"].split(","))
            )
        assert airgap_exfil > 0, "audit saw no air-gap exfiltration to check"


# 8 ---------------------------------------------------------------------------------

def brute_force_tiles(parts, n) -> bool:
    owner = [0] * n
    for p in parts:
        for s in range(p.start_lba, p.end):
            owner[s] += 1
    for r in disk.dark_regions_for(parts, n):
        for s in range(r.start_lba, r.end):
            owner[s] += 1
    return owner[0] == 0 and all(v == 1 for v in owner[1:])


def random_table(rng: random.Random):
    n = rng.randint(2, 2**16)
    cuts = sorted(rng.sample(range(1, n + 1), min(n, 2 * rng.randint(0, 4))))
    parts = [PartitionEntry(a, b - a) for a, b in zip(cuts[::2], cuts[1::2])]
    rng.shuffle(parts)
    return n, parts


def scan(path: str, baseline: str | None = None) -> tuple[int, str]:
    out = io.StringIO()
    argv = ["scan-image", "--image", path] + (["--baseline", baseline] if baseline else [])
    with contextlib.redirect_stdout(out):
        code = cli.main(argv)
    return code, out.getvalue()


def test_criterion_8_tiling_and_scanner(tmp_path):
    with criterion(8, "dark-region tiling and scanner", 20.0):
        rng = random.Random(8)
        for _ in range(150):
            n, parts = random_table(rng)
            assert brute_force_tiles(parts, n)

        layouts = [
            hostmodel.default_disk(4096, random.Random(1)),
            disk.DiskImage.create(2048, [PartitionEntry(64, 500, True), PartitionEntry(700, 600), PartitionEntry(1400, 300)], rng=random.Random(2)),
        ]
        for k, img in enumerate(layouts):
            path = tmp_path / f"fixture{k}.img"
            img.write_file(path)
            code, baseline_text = scan(str(path))
            assert code == 0
            baseline = tmp_path / f"baseline{k}.txt"
            baseline.write_text(baseline_text)
            pristine = path.read_bytes()
            for region in img.dark_regions():
                offset = (region.start_lba + rng.randrange(region.length)) * 512 + rng.randrange(512)
                mutated = bytearray(pristine)
                mutated[offset] ^= 0xFF
                path.write_bytes(bytes(mutated))
                code, out = scan(str(path), str(baseline))
                assert code == 1
                changed = [line for line in out.splitlines() if "status=CHANGED" in line]
                assert len(changed) == 1 and f"start={region.start_lba} " in changed[0]
                assert path.read_bytes() == bytes(mutated), "scan-image must not write"
            path.write_bytes(pristine)


# 9 ---------------------------------------------------------------------------------

def expected_blob(seed: int, target: str, index: int) -> bytes:
    label = {1: "validator", 2: "loader", 3: "dropper"}[index]
    return f"stage{index}:{label}:{target}:".encode() + sc._blob(seed, f"payload:{target}:{index}", 64)


def test_criterion_9_staged_payload_ordering():
    with criterion(9, "staged-payload ordering", 10.0):
        rng = random.Random(9)
        for i in range(80):
            s = sc.canonical()
            s.seed = rng.getrandbits(32)
            fail_at = rng.choice([None, 1, 2, 3, 4])
            s.failures = {} if fail_at is None else {"ws1": fail_at}
            s = s.with_defenses(**{t: rng.random() < 0.2 for t in TOGGLES})
            log, _ = recorded_run(s)
            text = log.to_text()
            successes, failed_at = {}, None
            for rec in log:
                if rec.kind == "StageReport" and rec["target"] == "ws1":
                    if rec["ok"] == "true":
                        successes[int(rec["index"])] = rec.seq
                    elif failed_at is None:
                        failed_at = rec.seq
                elif rec.kind == "PayloadDelivered" and rec["target"] == "ws1":
                    k = int(rec["index"])
                    assert rec["sha256"] == hashlib.sha256(expected_blob(s.seed, "ws1", k)).hexdigest()
                    if k > 1:
                        assert k - 1 in successes and successes[k - 1] < rec.seq, (i, k)
                    assert failed_at is None or rec.seq < failed_at, "payload after a failed stage"
            if fail_at is not None and fail_at <= 3:
                assert not [r for r in log.of_kind("PayloadDelivered") if int(r["index"]) > fail_at]
            for k in (1, 2, 3):
                blob = expected_blob(s.seed, "ws1", k)
                assert blob.hex() not in text and blob[-64:].hex() not in text
