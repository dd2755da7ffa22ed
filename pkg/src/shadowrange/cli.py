"""``shadowrange`` command line: run, validate, report and scan-image."""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import scenario as sc
from .disk import (
    SECTOR_SIZE,
    SIGNATURE,
    DarkRegion,
    dark_regions_for,
    decode_partition_table,
)
from .errors import CorruptLog, InvalidPartitionTable, ParseError, VersionMismatch
from .eventlog import EventLog, encode_value

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_PARSE = 2
EXIT_IO = 3
EXIT_ENGINE = 4

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
READ_CHUNK = 1 << 20

log = logging.getLogger("shadowrange")


def _configure_logging(verbosity: int) -> None:
    level = LOG_LEVELS.get(os.environ.get("SHADOWRANGE_LOG_LEVEL", "warn").lower(), logging.WARNING)
    level = max(logging.DEBUG, level - 10 * verbosity)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _line(record: str, /, **fields) -> str:
    return " ".join([record] + [f"{k}={encode_value(v)}" for k, v in fields.items()])


# -- run ---------------------------------------------------------------------------

def run_one(scenario_path: str, out_dir: str, seed: int | None = None) -> int:
    try:
        text = Path(scenario_path).read_text()
    except OSError as exc:
        print(f"error: cannot read {scenario_path}: {exc.strerror}", file=sys.stderr)
        return EXIT_IO
    try:
        s = sc.parse(text)
    except ParseError as exc:
        print(f"{scenario_path}: {exc}", file=sys.stderr)
        return EXIT_PARSE
    try:
        log_, report = sc.run(s, seed)
    except Exception:  # engine bug: fail loudly but with a distinct code
        log.exception("engine error while running %s", scenario_path)
        return EXIT_ENGINE
    try:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "events.log").write_text(log_.to_text())
        (out / "report.kv").write_text(report.to_kv())
        (out / "report.txt").write_text(report.to_text())
    except OSError as exc:
        print(f"error: cannot write to {out_dir}: {exc.strerror}", file=sys.stderr)
        return EXIT_IO
    log.info("%s: verdict %s", s.name, report.verdict)
    if s.expect == "defended" and report.verdict != "Contained":
        print(f"{s.name}: expected a defended run, got {report.verdict}", file=sys.stderr)
        return EXIT_FINDINGS
    return EXIT_OK


def _run_job(args: tuple[str, str, int | None]) -> int:
    return run_one(*args)


def cmd_run(scenario_path: str, out_dir: str, seed: int | None = None, jobs: int = 1) -> int:
    path = Path(scenario_path)
    if not path.is_dir():
        return run_one(scenario_path, out_dir, seed)
    files = sorted(path.glob("*.scn"))
    if not files:
        print(f"error: no .scn files in {scenario_path}", file=sys.stderr)
        return EXIT_IO
    work = [(str(f), str(Path(out_dir) / f.stem), seed) for f in files]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            codes = list(pool.map(_run_job, work))
    else:
        codes = [_run_job(w) for w in work]
    return max(codes)


def cmd_validate(scenario_path: str) -> int:
    try:
        text = Path(scenario_path).read_text()
    except OSError as exc:
        print(f"error: cannot read {scenario_path}: {exc.strerror}", file=sys.stderr)
        return EXIT_IO
    try:
        s = sc.parse(text)
    except ParseError as exc:
        print(f"{scenario_path}: {exc}", file=sys.stderr)
        return EXIT_PARSE
    print(f"ok {s.name}: {len(s.nodes)} nodes, {len(s.goals)} goals")
    return EXIT_OK


def cmd_report(log_path: str, fmt: str = "kv") -> int:
    try:
        text = Path(log_path).read_text()
    except (OSError, UnicodeDecodeError) as exc:
        print(f"error: cannot read {log_path}: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        report = sc.replay(EventLog.from_text(text))
    except (CorruptLog, VersionMismatch) as exc:
        print(f"{log_path}: {exc}", file=sys.stderr)
        return EXIT_PARSE
    sys.stdout.write(report.to_kv() if fmt == "kv" else report.to_text())
    return EXIT_OK


# -- scan-image --------------------------------------------------------------------

@dataclass
class ScanResult:
    lines: list[str] = field(default_factory=list)
    anomalies: list[str] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return EXIT_FINDINGS if self.anomalies else EXIT_OK

    def anomaly(self, reason: str, **fields) -> None:
        self.anomalies.append(_line("anomaly", reason=reason, **fields))


def _digest_range(f, start_lba: int, length: int) -> str:
    h = hashlib.sha256()
    f.seek(start_lba * SECTOR_SIZE)
    remaining = length * SECTOR_SIZE
    while remaining:
        chunk = f.read(min(READ_CHUNK, remaining))
        if not chunk:
            break
        h.update(chunk)
        remaining -= len(chunk)
    return h.hexdigest()


def read_baseline(path: str) -> dict[tuple[str, int, int], str]:
    """Parse a previous scan-image output; only its region lines matter."""
    out = {}
    for raw in Path(path).read_text().splitlines():
        parts = raw.split()
        if not parts or parts[0] != "region":
            continue
        kv = dict(p.split("=", 1) for p in parts[1:] if "=" in p)
        try:
            out[(kv["kind"], int(kv["start"]), int(kv["length"]))] = kv["sha256"]
        except (KeyError, ValueError):
            raise ValueError(f"malformed baseline line: {raw!r}") from None
    return out


def scan_image(image_path: str, baseline: dict[tuple[str, int, int], str] | None = None) -> ScanResult:
    """Read-only scan. Raises OSError if unreadable, ValueError if shorter than a sector."""
    res = ScanResult()
    size = os.path.getsize(image_path)
    if size < SECTOR_SIZE:
        raise ValueError(f"{image_path}: {size} bytes is shorter than one sector")
    n = size // SECTOR_SIZE
    with open(image_path, "rb") as f:
        sector0 = f.read(SECTOR_SIZE)
        sig_ok = sector0[510:512] == SIGNATURE
        res.lines.append(_line("image", sectors=n, bytes=size, signature="ok" if sig_ok else "missing"))
        if size % SECTOR_SIZE:
            res.anomaly("partial-trailing-sector", bytes=size % SECTOR_SIZE)
        if not sig_ok:
            res.anomaly("missing-signature", found=sector0[510:512].hex())
        entries = decode_partition_table(sector0) if sig_ok else []
        for i, e in enumerate(entries):
            res.lines.append(_line("partition", index=i, start=e.start_lba, length=e.length, bootable=e.bootable))
        regions: list[DarkRegion] = []
        if sig_ok:
            try:
                regions = dark_regions_for(entries, n)
            except InvalidPartitionTable as exc:
                res.anomaly("invalid-partition-table", detail=str(exc))
        table = [("sector0", 0, 1)] + [(r.kind.value, r.start_lba, r.length) for r in regions]
        for kind, start, length in table:
            digest = _digest_range(f, start, length)
            fields = dict(kind=kind, start=start, length=length, sha256=digest)
            if baseline is not None:
                expected = baseline.get((kind, start, length))
                status = "NEW" if expected is None else ("UNCHANGED" if expected == digest else "CHANGED")
                fields["status"] = status
                if status == "CHANGED":
                    res.anomaly("region-changed", kind=kind, start=start, length=length)
                elif status == "NEW":
                    res.anomaly("region-not-in-baseline", kind=kind, start=start, length=length)
            res.lines.append(_line("region", **fields))
        if baseline is not None:
            present = set(table)
            for kind, start, length in sorted(set(baseline) - present, key=lambda k: k[1]):
                res.anomaly("region-missing", kind=kind, start=start, length=length)
    return res


def cmd_scan_image(image_path: str, baseline_path: str | None = None) -> int:
    try:
        baseline = read_baseline(baseline_path) if baseline_path else None
    except (OSError, ValueError, UnicodeDecodeError) as exc:
        print(f"error: baseline {baseline_path}: {exc}", file=sys.stderr)
        return EXIT_PARSE
    try:
        res = scan_image(image_path, baseline)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    for line in res.lines + res.anomalies:
        print(line)
    return res.exit_code


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shadowrange", description="Kill-chain attack/defense simulator and dark-region scanner.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario (or a directory of them)")
    r.add_argument("--scenario", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--jobs", type=int, default=1)

    v = sub.add_parser("validate", help="check a scenario file")
    v.add_argument("--scenario", required=True)

    s = sub.add_parser("scan-image", help="scan a raw disk image for dark-region anomalies")
    s.add_argument("--image", required=True)
    s.add_argument("--baseline")

    rep = sub.add_parser("report", help="re-score an event log")
    rep.add_argument("--log", required=True)
    rep.add_argument("--format", choices=("kv", "text"), default="kv")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    if args.command == "run":
        return cmd_run(args.scenario, args.out, args.seed, args.jobs)
    if args.command == "validate":
        return cmd_validate(args.scenario)
    if args.command == "scan-image":
        return cmd_scan_image(args.image, args.baseline)
    return cmd_report(args.log, args.format)


if __name__ == "__main__":
    sys.exit(main())
