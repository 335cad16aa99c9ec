"""Approximate membership filter for leaf pages (a plain Bloom filter)."""

from __future__ import annotations

import math
import struct

import xxhash

from .errors import OpenFailure

FILTER_MAGIC = b"TKBF"
_HDR = struct.Struct("<4sIII")  # magic, nbits, nhashes, nkeys


def bits_per_key_for(fp_rate: float) -> float:
    return -math.log(fp_rate) / (math.log(2) ** 2)


class BloomFilter:
    __slots__ = ("nbits", "nhashes", "nkeys", "bits")

    def __init__(self, nbits: int, nhashes: int, nkeys: int = 0, bits: bytearray | None = None):
        self.nbits = nbits
        self.nhashes = nhashes
        self.nkeys = nkeys
        self.bits = bits if bits is not None else bytearray((nbits + 7) // 8)

    @classmethod
    def build(cls, keys, bits_per_key: float) -> "BloomFilter":
        keys = list(keys)
        nbits = max(64, math.ceil(len(keys) * bits_per_key)) if keys else 8
        nhashes = max(1, round(bits_per_key * math.log(2)))
        f = cls(nbits, nhashes, len(keys))
        for k in keys:
            f.add(k)
        return f

    def _probes(self, key: bytes):
        h = xxhash.xxh3_128_intdigest(key)
        h1, h2 = h & 0xFFFFFFFFFFFFFFFF, (h >> 64) | 1
        m = self.nbits
        return ((h1 + i * h2) % m for i in range(self.nhashes))

    def add(self, key: bytes) -> None:
        bits = self.bits
        for b in self._probes(key):
            bits[b >> 3] |= 1 << (b & 7)

    def contains(self, key: bytes) -> bool:
        if not self.nkeys:
            return False
        bits = self.bits
        return all(bits[b >> 3] >> (b & 7) & 1 for b in self._probes(key))

    __contains__ = contains

    def encode(self) -> bytes:
        return _HDR.pack(FILTER_MAGIC, self.nbits, self.nhashes, self.nkeys) + bytes(self.bits)

    @classmethod
    def decode(cls, buf: bytes) -> "BloomFilter":
        magic, nbits, nhashes, nkeys = _HDR.unpack_from(buf, 0)
        if magic != FILTER_MAGIC:
            raise OpenFailure("not a filter page")
        nbytes = (nbits + 7) // 8
        return cls(nbits, nhashes, nkeys, bytearray(buf[_HDR.size:_HDR.size + nbytes]))

    @property
    def encoded_bytes(self) -> int:
        return _HDR.size + len(self.bits)
