from __future__ import annotations

import hashlib
import random
import subprocess
import sys

import pytest

from shadowrange import cli, hostmodel
from shadowrange import scenario as sc
from shadowrange.disk import DiskImage, PartitionEntry

CANONICAL = str(sc.canonical_path())


def run_cli(*argv) -> int:
    return cli.main(list(argv))


def fixture_image(tmp_path, name="disk.img", seed=0) -> tuple[str, DiskImage]:
    img = hostmodel.default_disk(4096, random.Random(seed))
    path = tmp_path / name
    img.write_file(path)
    return str(path), img


def digest(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


# -- run ---------------------------------------------------------------------------

def test_run_writes_three_files(tmp_path):
    assert run_cli("run", "--scenario", CANONICAL, "--out", str(tmp_path / "o")) == cli.EXIT_OK
    assert sorted(p.name for p in (tmp_path / "o").iterdir()) == ["events.log", "report.kv", "report.txt"]
    assert "verdict value=FullCompromise" in (tmp_path / "o" / "report.kv").read_text()


def test_run_bad_path(tmp_path, capsys):
    assert run_cli("run", "--scenario", str(tmp_path / "nope.scn"), "--out", str(tmp_path)) == cli.EXIT_IO
    assert "cannot read" in capsys.readouterr().err


def test_run_parse_error(tmp_path):
    bad = tmp_path / "bad.scn"
    bad.write_text("[topology]\nnode = a\nnode = a\n")
    assert run_cli("run", "--scenario", str(bad), "--out", str(tmp_path / "o")) == cli.EXIT_PARSE


def test_seed_override_changes_digest(tmp_path):
    run_cli("run", "--scenario", CANONICAL, "--out", str(tmp_path / "a"))
    run_cli("run", "--scenario", CANONICAL, "--out", str(tmp_path / "b"), "--seed", "99")
    run_cli("run", "--scenario", CANONICAL, "--out", str(tmp_path / "c"))
    a, b, c = (digest(tmp_path / d / "events.log") for d in "abc")
    assert a != b and a == c


def test_defended_expectation_sets_exit_code(tmp_path):
    text = sc.canonical_path().read_text().replace("expect = any", "expect = defended")
    path = tmp_path / "strict.scn"
    path.write_text(text)
    assert run_cli("run", "--scenario", str(path), "--out", str(tmp_path / "o")) == cli.EXIT_FINDINGS
    benign = str(sc.canonical_path("benign"))
    assert run_cli("run", "--scenario", benign, "--out", str(tmp_path / "b")) == cli.EXIT_OK


def test_run_directory_in_parallel(tmp_path):
    d = tmp_path / "scns"
    d.mkdir()
    for name in ("canonical", "benign"):
        (d / f"{name}.scn").write_text(sc.canonical_path(name).read_text())
    assert run_cli("run", "--scenario", str(d), "--out", str(tmp_path / "o"), "--jobs", "2") == cli.EXIT_OK
    assert (tmp_path / "o" / "benign" / "events.log").exists()
    serial = tmp_path / "serial"
    run_cli("run", "--scenario", str(d), "--out", str(serial))
    assert digest(serial / "canonical" / "events.log") == digest(tmp_path / "o" / "canonical" / "events.log")


# -- validate --------------------------------------------------------------------------

def test_validate_canonical(capsys):
    assert run_cli("validate", "--scenario", CANONICAL) == cli.EXIT_OK
    assert "6 nodes" in capsys.readouterr().out


def test_validate_unknown_node(tmp_path, capsys):
    path = tmp_path / "s.scn"
    path.write_text("[topology]\nnode = a kind=C2Server\nlink = a zed\n")
    assert run_cli("validate", "--scenario", str(path)) == cli.EXIT_PARSE
    assert "zed" in capsys.readouterr().err


def test_validate_duplicate_node(tmp_path):
    path = tmp_path / "s.scn"
    path.write_text("[topology]\nnode = a\nnode = a\n")
    assert run_cli("validate", "--scenario", str(path)) == cli.EXIT_PARSE


# -- report ------------------------------------------------------------------------------

def test_report_matches_stored(tmp_path, capsys):
    out = tmp_path / "o"
    run_cli("run", "--scenario", CANONICAL, "--out", str(out))
    capsys.readouterr()
    assert run_cli("report", "--log", str(out / "events.log")) == cli.EXIT_OK
    assert capsys.readouterr().out == (out / "report.kv").read_text()
    assert run_cli("report", "--log", str(out / "events.log"), "--format", "text") == cli.EXIT_OK
    assert capsys.readouterr().out == (out / "report.txt").read_text()


def test_report_truncated_log(tmp_path):
    out = tmp_path / "o"
    run_cli("run", "--scenario", CANONICAL, "--out", str(out))
    text = (out / "events.log").read_text()
    trunc = tmp_path / "t.log"
    trunc.write_text(text[: len(text) - 40])
    assert run_cli("report", "--log", str(trunc)) == cli.EXIT_PARSE


def test_report_empty_log(tmp_path, capsys):
    empty = tmp_path / "e.log"
    empty.write_text("")
    assert run_cli("report", "--log", str(empty)) == cli.EXIT_OK
    assert capsys.readouterr().out == ""


def test_report_missing_log(tmp_path):
    assert run_cli("report", "--log", str(tmp_path / "none.log")) == cli.EXIT_IO


# -- scan-image ----------------------------------------------------------------------------

def test_scan_clean_image(tmp_path, capsys):
    path, img = fixture_image(tmp_path)
    before = digest(path)
    assert run_cli("scan-image", "--image", path) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert digest(path) == before
    regions = [line for line in out.splitlines() if line.startswith("region ")]
    assert len(regions) == 1 + len(img.dark_regions())
    assert "kind=InterPartitionGap" in out and "anomaly" not in out


def test_scan_detects_gap_write_against_baseline(tmp_path, capsys):
    path, img = fixture_image(tmp_path)
    run_cli("scan-image", "--image", path)
    baseline = tmp_path / "baseline.txt"
    baseline.write_text(capsys.readouterr().out)
    gap = next(r for r in img.dark_regions() if r.kind.value == "InterPartitionGap")
    with open(path, "r+b") as f:
        f.seek(gap.start_lba * 512 + 100)
        f.write(b"\xcc" * 1024)
    before = digest(path)
    assert run_cli("scan-image", "--image", path, "--baseline", str(baseline)) == cli.EXIT_FINDINGS
    out = capsys.readouterr().out
    assert digest(path) == before
    changed = [line for line in out.splitlines() if "status=CHANGED" in line]
    assert len(changed) == 1 and "kind=InterPartitionGap" in changed[0]
    assert "anomaly reason=region-changed" in out


def test_scan_unchanged_against_baseline(tmp_path, capsys):
    path, _ = fixture_image(tmp_path)
    run_cli("scan-image", "--image", path)
    baseline = tmp_path / "b.txt"
    baseline.write_text(capsys.readouterr().out)
    assert run_cli("scan-image", "--image", path, "--baseline", str(baseline)) == cli.EXIT_OK
    assert "status=CHANGED" not in capsys.readouterr().out


def test_scan_missing_signature(tmp_path, capsys):
    path, _ = fixture_image(tmp_path)
    with open(path, "r+b") as f:
        f.seek(510)
        f.write(b"\x00\x00")
    assert run_cli("scan-image", "--image", path) == cli.EXIT_FINDINGS
    assert "reason=missing-signature" in capsys.readouterr().out


def test_scan_overlapping_partitions(tmp_path, capsys):
    img = DiskImage.create(256, [PartitionEntry(8, 16, True)], rng=random.Random(0))
    raw = bytearray(img.to_bytes())
    entry = 446 + 16
    raw[entry + 8 : entry + 12] = (10).to_bytes(4, "little")
    raw[entry + 12 : entry + 16] = (20).to_bytes(4, "little")
    raw[entry + 4] = 0x07
    path = tmp_path / "overlap.img"
    path.write_bytes(bytes(raw))
    assert run_cli("scan-image", "--image", str(path)) == cli.EXIT_FINDINGS
    assert "invalid-partition-table" in capsys.readouterr().out


@pytest.mark.parametrize("content", [b"", b"\x00" * 100])
def test_scan_short_image(tmp_path, content):
    path = tmp_path / "short.img"
    path.write_bytes(content)
    assert run_cli("scan-image", "--image", str(path)) == cli.EXIT_PARSE


def test_scan_unreadable_image(tmp_path):
    assert run_cli("scan-image", "--image", str(tmp_path / "missing.img")) == cli.EXIT_PARSE


def test_scan_partial_trailing_sector(tmp_path, capsys):
    path, _ = fixture_image(tmp_path)
    with open(path, "ab") as f:
        f.write(b"\x00" * 7)
    assert run_cli("scan-image", "--image", path) == cli.EXIT_FINDINGS
    assert "partial-trailing-sector" in capsys.readouterr().out


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "shadowrange.cli", "validate", "--scenario", CANONICAL],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0 and proc.stdout.startswith("ok canonical")


def test_exit_codes_are_stable(tmp_path):
    path, _ = fixture_image(tmp_path)
    codes = {run_cli("scan-image", "--image", path) for _ in range(3)}
    assert codes == {cli.EXIT_OK}
