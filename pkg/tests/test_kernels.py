from __future__ import annotations

import hashlib

import pytest
from hypothesis import given
from hypothesis import strategies as st

from shadowrange import _purekernels, kernels


def reference_keystream(key: bytes, nonce: bytes, counter: int, n: int) -> bytes:
    out = b""
    i = 0
    while len(out) < n:
        out += hashlib.sha256(key + nonce + counter.to_bytes(8, "big") + i.to_bytes(8, "big")).digest()
        i += 1
    return out[:n]


def reference_fnv1a(data: bytes) -> int:
    h = 0x811C9DC5
    for b in data:
        h ^= b
        h = (h * 0x01000193) % 2**32
    return h


@given(st.binary(min_size=32, max_size=32), st.binary(min_size=8, max_size=8), st.integers(0, 2**64 - 1), st.binary(max_size=300))
def test_pure_keystream_matches_block_reference(key, nonce, counter, data):
    stream = reference_keystream(key, nonce, counter, len(data))
    assert _purekernels.keystream_xor(key, nonce, counter, data) == bytes(a ^ b for a, b in zip(data, stream))


@given(st.binary(min_size=32, max_size=32), st.binary(min_size=8, max_size=8), st.integers(0, 2**64 - 1), st.binary(max_size=2000))
def test_selected_backend_agrees_with_pure(key, nonce, counter, data):
    assert kernels.keystream_xor(key, nonce, counter, data) == _purekernels.keystream_xor(key, nonce, counter, data)


@given(st.binary(max_size=200))
def test_fnv_backends_agree_with_reference(data):
    assert _purekernels.fnv1a32(data) == reference_fnv1a(data)
    assert kernels.fnv1a32(data) == reference_fnv1a(data)


def test_backend_name_is_known():
    assert kernels.BACKEND in ("pure", "compiled")


def test_compiled_extension_handles_bytearray_and_memoryview():
    speed = pytest.importorskip("shadowrange._speedups")
    key, nonce = bytes(32), bytes(8)
    data = bytes(range(100))
    expected = _purekernels.keystream_xor(key, nonce, 3, data)
    assert speed.keystream_xor(key, nonce, 3, bytearray(data)) == expected
    assert speed.keystream_xor(key, nonce, 3, memoryview(data)) == expected
    assert speed.fnv1a32(b"a") == 0xE40C292C
