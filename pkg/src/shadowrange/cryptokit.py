"""Cryptographic primitives, all built on SHA-256 plus modular exponentiation.

None of this is meant to be strong; it is meant to be deterministic and small
enough to reason about in tests.
"""

from __future__ import annotations

import hashlib
import hmac
import random
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

from . import kernels
from .errors import BadLength, CounterReplay, InvalidPublic, TagMismatch

HASH_SIZE = 32
TAG_SIZE = 16
COUNTER_SIZE = 8
SEAL_OVERHEAD = COUNTER_SIZE + TAG_SIZE
GRAYFISH_ROUNDS = 1000


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class DhGroup:
    p: int
    g: int

    def __post_init__(self):
        if not 1 < self.g < self.p:
            raise ValueError(f"generator {self.g} outside (1, {self.p})")


# 2**127 - 1 is a Mersenne prime; public values fit the 16-byte wire field.
DEFAULT_GROUP = DhGroup(p=(1 << 127) - 1, g=3)
DH_PUBLIC_SIZE = 16


def dh_keypair(group: DhGroup, rng: random.Random) -> tuple[int, int]:
    private = rng.randint(2, group.p - 2)
    return private, pow(group.g, private, group.p)


def dh_shared(group: DhGroup, private: int, peer_public: int) -> bytes:
    if not 0 < peer_public < group.p:
        raise InvalidPublic(f"peer public value {peer_public} outside (0, p)")
    shared = pow(peer_public, private, group.p)
    return sha256(shared.to_bytes(DH_PUBLIC_SIZE, "big"))


@dataclass
class ChannelState:
    """One end of the sealed channel.

    The wire form of a sealed message is ``BE64(counter) || body || tag`` where
    ``tag = H(key || BE64(counter) || body)[:16]``.
    """

    session_key: bytes
    nonce: bytes
    send_counter: int = 0
    recv_counter: int = 0
    closed: bool = False

    def __post_init__(self):
        if len(self.session_key) != HASH_SIZE:
            raise BadLength("session key must be 32 bytes")
        if len(self.nonce) != 8:
            raise BadLength("nonce must be 8 bytes")

    def peer(self) -> "ChannelState":
        """A fresh state for the other end, sharing key and nonce."""
        return ChannelState(self.session_key, self.nonce)


def seal(channel: ChannelState, plaintext: bytes) -> bytes:
    counter = channel.send_counter
    header = counter.to_bytes(COUNTER_SIZE, "big")
    body = kernels.keystream_xor(channel.session_key, channel.nonce, counter, plaintext)
    sealed = header + body
    channel.send_counter = counter + 1
    return sealed + sha256(channel.session_key + sealed)[:TAG_SIZE]


def open_sealed(channel: ChannelState, message: bytes) -> bytes:
    if len(message) < SEAL_OVERHEAD:
        raise TagMismatch("message shorter than framing")
    sealed, tag = message[:-TAG_SIZE], message[-TAG_SIZE:]
    if not hmac.compare_digest(sha256(channel.session_key + sealed)[:TAG_SIZE], tag):
        raise TagMismatch("integrity tag does not verify")
    counter = int.from_bytes(sealed[:COUNTER_SIZE], "big")
    if counter < channel.recv_counter:
        raise CounterReplay(f"counter {counter} already consumed (next {channel.recv_counter})")
    channel.recv_counter = counter + 1
    return kernels.keystream_xor(channel.session_key, channel.nonce, counter, sealed[COUNTER_SIZE:])


def grayfish_key(
    object_id: bytes,
    *,
    salted: bool = False,
    hash_fn: Callable[[bytes], bytes] = sha256,
    rounds: int = GRAYFISH_ROUNDS,
) -> bytes:
    """Derive the VFS key from a 16-byte NTFS object id.

    Default is pure chaining, ``h1 = H(id)``, ``h(k+1) = H(h(k))``.  With
    ``salted=True`` every later round is ``H(h(k) || id)``.
    """
    if len(object_id) != 16:
        raise BadLength(f"object id must be 16 bytes, got {len(object_id)}")
    h = hash_fn(object_id)
    for _ in range(rounds - 1):
        h = hash_fn(h + object_id) if salted else hash_fn(h)
    return h


def fn_name_hash(name: bytes | str) -> int:
    if isinstance(name, str):
        name = name.encode()
    return kernels.fnv1a32(name)


def _segments_digest(segments: Iterable[tuple[int, bytes]]) -> bytes:
    h = hashlib.sha256()
    for seg_id, blob in segments:
        h.update(seg_id.to_bytes(4, "big"))
        h.update(len(blob).to_bytes(4, "big"))
        h.update(blob)
    return h.digest()


def firmware_tag(vendor_key: bytes, segments: Mapping[int, bytes]) -> bytes:
    """Keyed tag over segments in ascending id order."""
    return sha256(vendor_key + _segments_digest(sorted(segments.items())))


def firmware_verify(vendor_key: bytes, segments: Mapping[int, bytes], tag: bytes) -> bool:
    return hmac.compare_digest(firmware_tag(vendor_key, segments), tag)
