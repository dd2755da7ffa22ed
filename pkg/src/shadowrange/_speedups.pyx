# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled kernels for the sealed channel and the rootkit name hash.

Behaviour must match :mod:`shadowrange._purekernels` byte for byte.
"""

from libc.string cimport memcpy
from libc.stdint cimport uint8_t, uint32_t, uint64_t
from cpython.bytes cimport PyBytes_FromStringAndSize, PyBytes_AS_STRING


cdef extern from "openssl/sha.h" nogil:
    ctypedef struct SHA256_CTX:
        pass
    int SHA256_Init(SHA256_CTX *c)
    int SHA256_Update(SHA256_CTX *c, const void *data, size_t len)
    int SHA256_Final(unsigned char *md, SHA256_CTX *c)


def keystream_xor(const uint8_t[::1] key, const uint8_t[::1] nonce,
                  uint64_t counter, const uint8_t[::1] data):
    """XOR ``data`` with SHA-256(key || nonce || BE64(counter) || BE64(i)) blocks."""
    cdef Py_ssize_t n = data.shape[0]
    cdef bytes out = PyBytes_FromStringAndSize(NULL, n)
    cdef uint8_t *dst = <uint8_t *> PyBytes_AS_STRING(out)
    cdef SHA256_CTX prefix, ctx
    cdef unsigned char block[32]
    cdef unsigned char ctr[8]
    cdef unsigned char idx[8]
    cdef uint64_t i = 0
    cdef Py_ssize_t pos = 0, take, j
    cdef int b

    for b in range(8):
        ctr[b] = <unsigned char> ((counter >> (56 - 8 * b)) & 0xFF)
    with nogil:
        SHA256_Init(&prefix)
        if key.shape[0]:
            SHA256_Update(&prefix, &key[0], key.shape[0])
        if nonce.shape[0]:
            SHA256_Update(&prefix, &nonce[0], nonce.shape[0])
        SHA256_Update(&prefix, ctr, 8)
        while pos < n:
            for b in range(8):
                idx[b] = <unsigned char> ((i >> (56 - 8 * b)) & 0xFF)
            memcpy(&ctx, &prefix, sizeof(SHA256_CTX))
            SHA256_Update(&ctx, idx, 8)
            SHA256_Final(block, &ctx)
            take = n - pos
            if take > 32:
                take = 32
            for j in range(take):
                dst[pos + j] = data[pos + j] ^ block[j]
            pos += take
            i += 1
    return out


def fnv1a32(const uint8_t[::1] data):
    cdef uint32_t h = 2166136261u
    cdef Py_ssize_t k
    for k in range(data.shape[0]):
        h = (h ^ data[k]) * 16777619u
    return h
