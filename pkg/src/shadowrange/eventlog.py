"""Append-only run log.

One record per line: ``<seq> <tick> <kind> key=value ...``. Values are
percent-encoded so they never contain spaces or ``=``. The last line is
``#digest sha256=<hex>`` over every preceding byte, which is how tampering and
truncation are caught.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterator
from urllib.parse import quote, unquote

from .errors import CorruptLog

LOG_VERSION = "1"
DIGEST_PREFIX = "#digest sha256="
_SAFE = "!$&'()*+,-./:;<>?@[]^_`{|}~"


def encode_value(value: Any) -> str:
    if isinstance(value, bool):
        value = "true" if value else "false"
    elif isinstance(value, Enum):
        value = value.value
    elif isinstance(value, (bytes, bytearray)):
        value = bytes(value).hex()
    elif isinstance(value, (list, tuple)):
        value = ",".join(str(encode_value(v)) for v in value)
    elif value is None:
        value = "-"
    return quote(str(value), safe=_SAFE)


@dataclass(frozen=True)
class Record:
    seq: int
    tick: int
    kind: str
    fields: dict[str, str] = field(default_factory=dict)

    def get(self, key: str, default: str | None = None) -> str | None:
        return self.fields.get(key, default)

    def __getitem__(self, key: str) -> str:
        return self.fields[key]

    def to_line(self) -> str:
        parts = [str(self.seq), str(self.tick), self.kind]
        parts += [f"{k}={encode_value(v)}" for k, v in self.fields.items()]
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str, lineno: int = 0) -> "Record":
        parts = line.split(" ")
        if len(parts) < 3:
            raise CorruptLog(f"line {lineno}: record needs seq, tick and kind")
        try:
            seq, tick = int(parts[0]), int(parts[1])
        except ValueError:
            raise CorruptLog(f"line {lineno}: seq/tick not integers") from None
        fields = {}
        for token in parts[3:]:
            key, sep, value = token.partition("=")
            if not sep or not key:
                raise CorruptLog(f"line {lineno}: malformed field {token!r}")
            fields[key] = unquote(value)
        return cls(seq, tick, parts[2], fields)


class EventLog:
    def __init__(self, records: list[Record] | None = None):
        self.records: list[Record] = list(records or [])

    def append(self, tick: int, kind: str, **fields: Any) -> Record:
        seq = self.records[-1].seq + 1 if self.records else 0
        clean = {k: unquote(encode_value(v)) for k, v in fields.items()}
        rec = Record(seq, tick, kind, clean)
        self.records.append(rec)
        return rec

    def __iter__(self) -> Iterator[Record]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def of_kind(self, *kinds: str) -> list[Record]:
        return [r for r in self.records if r.kind in kinds]

    def to_text(self) -> str:
        if not self.records:
            return ""
        body = "".join(r.to_line() + "\n" for r in self.records)
        digest = hashlib.sha256(body.encode()).hexdigest()
        return f"{body}{DIGEST_PREFIX}{digest}\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    @classmethod
    def from_text(cls, text: str) -> "EventLog":
        if text == "":
            return cls()
        if not text.endswith("\n"):
            raise CorruptLog("log does not end with a newline (truncated?)")
        lines = text[:-1].split("\n")
        last = lines[-1]
        if not last.startswith(DIGEST_PREFIX):
            raise CorruptLog("missing trailing digest line (truncated?)")
        body = "".join(line + "\n" for line in lines[:-1])
        if hashlib.sha256(body.encode()).hexdigest() != last[len(DIGEST_PREFIX):]:
            raise CorruptLog("digest mismatch: log was modified")
        records = [Record.from_line(line, i + 1) for i, line in enumerate(lines[:-1])]
        for prev, cur in zip(records, records[1:]):
            if cur.seq <= prev.seq or cur.tick < prev.tick:
                raise CorruptLog(f"record {cur.seq}: sequence or clock went backwards")
        return cls(records)
