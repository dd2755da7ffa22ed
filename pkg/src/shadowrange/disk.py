"""Sectored disk images with a classic MBR partition table.

Sector 0 layout: boot code ``[0, 446)``, four 16-byte partition entries at
``[446, 510)``, signature ``55 AA`` at ``[510, 512)``. In an entry, byte 0 is
the boot flag (0x80), bytes 8-11 the start LBA and bytes 12-15 the length,
both little-endian. An entry with length 0 is an empty slot.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, Sequence

from .errors import InvalidPartitionTable

SECTOR_SIZE = 512
BOOT_CODE_SIZE = 446
PT_OFFSET = 446
PT_ENTRY_SIZE = 16
PT_ENTRIES = 4
SIGNATURE = b"\x55\xaa"
BOOTABLE_FLAG = 0x80

_ENTRY = struct.Struct("<B3xB3xII")


class Provenance(IntEnum):
    PRISTINE = 0
    VENDOR_UPDATE = 1
    ATTACKER_WRITE = 2


class RegionKind(str, Enum):
    MBR_GAP = "MbrGap"
    INTER_PARTITION_GAP = "InterPartitionGap"
    TAIL_GAP = "TailGap"


@dataclass(frozen=True)
class PartitionEntry:
    start_lba: int
    length: int
    bootable: bool = False

    @property
    def end(self) -> int:
        return self.start_lba + self.length


@dataclass(frozen=True)
class DarkRegion:
    kind: RegionKind
    start_lba: int
    length: int

    @property
    def end(self) -> int:
        return self.start_lba + self.length


def encode_partition_table(entries: Sequence[PartitionEntry]) -> bytes:
    if len(entries) > PT_ENTRIES:
        raise InvalidPartitionTable(f"at most {PT_ENTRIES} entries, got {len(entries)}")
    out = bytearray()
    for e in entries:
        out += _ENTRY.pack(BOOTABLE_FLAG if e.bootable else 0, 0x07, e.start_lba, e.length)
    out += bytes(PT_ENTRY_SIZE * (PT_ENTRIES - len(entries)))
    return bytes(out)


def decode_partition_table(sector0: bytes) -> list[PartitionEntry]:
    entries = []
    for i in range(PT_ENTRIES):
        off = PT_OFFSET + i * PT_ENTRY_SIZE
        flag = sector0[off]
        start, length = struct.unpack_from("<II", sector0, off + 8)
        if length:
            entries.append(PartitionEntry(start, length, flag == BOOTABLE_FLAG))
    return entries


def validate_partitions(entries: Iterable[PartitionEntry], sector_count: int) -> list[PartitionEntry]:
    """Return entries sorted by start, raising on overlap or out-of-range."""
    ordered = sorted(entries, key=lambda e: (e.start_lba, e.length))
    if sum(e.bootable for e in ordered) > 1:
        raise InvalidPartitionTable("more than one bootable partition")
    prev_end = 1
    for e in ordered:
        if e.start_lba < 1 or e.end > sector_count:
            raise InvalidPartitionTable(
                f"partition [{e.start_lba}, {e.end}) outside [1, {sector_count})"
            )
        if e.start_lba < prev_end:
            raise InvalidPartitionTable(f"partition at {e.start_lba} overlaps previous ending at {prev_end}")
        prev_end = e.end
    return ordered


def dark_regions_for(entries: Iterable[PartitionEntry], sector_count: int) -> list[DarkRegion]:
    ordered = validate_partitions(entries, sector_count)
    regions = []
    cursor = 1
    for i, e in enumerate(ordered):
        if e.start_lba > cursor:
            kind = RegionKind.MBR_GAP if i == 0 else RegionKind.INTER_PARTITION_GAP
            regions.append(DarkRegion(kind, cursor, e.start_lba - cursor))
        cursor = e.end
    if not ordered:
        if sector_count > 1:
            regions.append(DarkRegion(RegionKind.MBR_GAP, 1, sector_count - 1))
    elif sector_count > cursor:
        regions.append(DarkRegion(RegionKind.TAIL_GAP, cursor, sector_count - cursor))
    return regions


@dataclass(frozen=True)
class SectorWrite:
    """Undo record for a sector-range write."""

    lba: int
    before: bytes
    before_provenance: bytes


class DiskImage:
    sector_size = SECTOR_SIZE

    def __init__(self, data: bytes | bytearray, ntfs_object_id: dict[int, bytes] | None = None):
        if len(data) < SECTOR_SIZE or len(data) % SECTOR_SIZE:
            raise ValueError("disk image must be a positive multiple of 512 bytes")
        self.data = bytearray(data)
        self.provenance = bytearray(self.sector_count)
        self.ntfs_object_id: dict[int, bytes] = dict(ntfs_object_id or {})
        self._pristine = bytes(self.data)

    @classmethod
    def create(
        cls,
        sector_count: int,
        partitions: Sequence[PartitionEntry],
        *,
        boot_code: bytes = b"",
        rng: random.Random | None = None,
    ) -> "DiskImage":
        rng = rng or random.Random(0)
        validate_partitions(partitions, sector_count)
        data = bytearray(sector_count * SECTOR_SIZE)
        code = (boot_code or b"\xfa\x33\xc0\x8e\xd0\xbc\x00\x7c" + b"MBR-LOADER")[:BOOT_CODE_SIZE]
        data[: len(code)] = code
        data[PT_OFFSET:510] = encode_partition_table(partitions)
        data[510:512] = SIGNATURE
        ids = {}
        for i, p in enumerate(partitions):
            vbr = p.start_lba * SECTOR_SIZE
            data[vbr : vbr + 11] = b"\xeb\x52\x90NTFS    "
            data[vbr + 510 : vbr + 512] = SIGNATURE
            ids[i] = rng.randbytes(16)
        return cls(data, ids)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "DiskImage":
        return cls(raw)

    @classmethod
    def from_file(cls, path: str | Path) -> "DiskImage":
        return cls(Path(path).read_bytes())

    def to_bytes(self) -> bytes:
        return bytes(self.data)

    def write_file(self, path: str | Path) -> None:
        Path(path).write_bytes(self.data)

    @property
    def sector_count(self) -> int:
        return len(self.data) // SECTOR_SIZE

    @property
    def partition_table(self) -> list[PartitionEntry]:
        return decode_partition_table(self.data[:SECTOR_SIZE])

    def bootable_index(self) -> int | None:
        for i, e in enumerate(self.partition_table):
            if e.bootable:
                return i
        return None

    def dark_regions(self) -> list[DarkRegion]:
        return dark_regions_for(self.partition_table, self.sector_count)

    def read(self, lba: int, count: int = 1) -> bytes:
        return bytes(self.data[lba * SECTOR_SIZE : (lba + count) * SECTOR_SIZE])

    def write(self, lba: int, payload: bytes, provenance: Provenance, offset: int = 0) -> SectorWrite:
        """Write ``payload`` at byte ``offset`` within sector ``lba``."""
        start = lba * SECTOR_SIZE + offset
        end = start + len(payload)
        if lba < 0 or end > len(self.data):
            raise ValueError("write beyond end of disk")
        last = (end - 1) // SECTOR_SIZE if payload else lba
        undo = SectorWrite(
            lba,
            bytes(self.data[lba * SECTOR_SIZE : (last + 1) * SECTOR_SIZE]),
            bytes(self.provenance[lba : last + 1]),
        )
        self.data[start:end] = payload
        self.provenance[lba : last + 1] = bytes([provenance]) * (last + 1 - lba)
        return undo

    def undo(self, record: SectorWrite) -> None:
        start = record.lba * SECTOR_SIZE
        self.data[start : start + len(record.before)] = record.before
        self.provenance[record.lba : record.lba + len(record.before_provenance)] = record.before_provenance

    def provenance_tags(self) -> list[tuple[int, int, Provenance]]:
        """Run-length (start, end, tag) ranges covering every sector."""
        runs = []
        start = 0
        for i in range(1, self.sector_count + 1):
            if i == self.sector_count or self.provenance[i] != self.provenance[start]:
                runs.append((start, i, Provenance(self.provenance[start])))
                start = i
        return runs

    def reset_boot_code(self) -> None:
        self.data[:BOOT_CODE_SIZE] = self._pristine[:BOOT_CODE_SIZE]
        if self.data[:SECTOR_SIZE] == self._pristine[:SECTOR_SIZE]:
            self.provenance[0] = Provenance.PRISTINE

    def restore_partitions(self) -> None:
        for e in self.partition_table:
            a, b = e.start_lba * SECTOR_SIZE, e.end * SECTOR_SIZE
            self.data[a:b] = self._pristine[a:b]
            self.provenance[e.start_lba : e.end] = bytes(e.length)
