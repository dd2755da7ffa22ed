"""Reference implementations of the hot kernels (no compiler required)."""

from __future__ import annotations

import hashlib

_FNV_OFFSET = 2166136261
_FNV_PRIME = 16777619


def keystream_xor(key: bytes, nonce: bytes, counter: int, data: bytes) -> bytes:
    n = len(data)
    if n == 0:
        return b""
    prefix = hashlib.sha256(bytes(key) + bytes(nonce) + counter.to_bytes(8, "big"))
    blocks = []
    for i in range((n + 31) // 32):
        h = prefix.copy()
        h.update(i.to_bytes(8, "big"))
        blocks.append(h.digest())
    stream = b"".join(blocks)[:n]
    return (int.from_bytes(data, "big") ^ int.from_bytes(stream, "big")).to_bytes(n, "big")


def fnv1a32(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in bytes(data):
        h = ((h ^ b) * _FNV_PRIME) & 0xFFFFFFFF
    return h
