"""YCSB-style workload generation.

Everything here is a pure function of (spec, seed).  The PRNG is
xorshift64* with shift triple (12, 25, 27) and multiplier
0x2545F4914F6CDD1D, seeded through one splitmix64 step so that small
integer seeds still give well-mixed state.  Keys follow YCSB's hashed
insert order (``user`` + FNV-1a-64 of the record number) and the skewed
key chooser is YCSB's scrambled zipfian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator

from ..errors import InvalidParameter

MASK64 = (1 << 64) - 1
XORSHIFT_MULT = 0x2545F4914F6CDD1D
FNV_OFFSET_64 = 0xCBF29CE484222325
FNV_PRIME_64 = 0x100000001B3

ZIPF_THETA = 0.99
# YCSB draws zipfian ranks over a fixed huge item space and scrambles them
ZIPF_ITEM_SPACE = 10_000_000_000
ZIPF_ZETAN = 26.46902820178302  # zeta(ZIPF_ITEM_SPACE, 0.99), as tabulated by YCSB


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


class XorShift64Star:
    __slots__ = ("state",)

    def __init__(self, seed: int):
        s = splitmix64(seed & MASK64)
        self.state = s or 0x9E3779B97F4A7C15

    def next(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * XORSHIFT_MULT) & MASK64

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next() >> 11) * (1.0 / (1 << 53))

    def below(self, n: int) -> int:
        return int(self.random() * n)

    def between(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi]."""
        return lo + self.below(hi - lo + 1)


def fnv1a64(value: int) -> int:
    """YCSB's FNVhash64 over the eight little-endian bytes of ``value``.

    YCSB computes it on a signed Java long and returns the absolute value, so
    the result is folded the same way.
    """
    h = FNV_OFFSET_64
    for _ in range(8):
        h ^= value & 0xFF
        value >>= 8
        h = (h * FNV_PRIME_64) & MASK64
    if h >= 1 << 63:
        h = (1 << 64) - h
        if h == 1 << 63:  # Math.abs(Long.MIN_VALUE) stays negative in Java
            h = 0
    return h


def zeta(n: int, theta: float) -> float:
    return math.fsum(1.0 / (i + 1) ** theta for i in range(n))


class ZipfianRanks:
    """Ranks in [0, items) with YCSB's (Gray et al.) approximate zipfian.

    Rank 0 is the most popular.
    """

    def __init__(self, items: int, theta: float = ZIPF_THETA, zetan: float | None = None):
        self.items = items
        self.theta = theta
        self.zeta2 = zeta(2, theta)
        self.zetan = zetan if zetan is not None else zeta(items, theta)
        self.alpha = 1.0 / (1.0 - theta)
        self.eta = (1 - (2.0 / items) ** (1 - theta)) / (1 - self.zeta2 / self.zetan)
        self.half_pow = 0.5 ** theta

    def from_uniform(self, u: float) -> int:
        uz = u * self.zetan
        if uz < 1.0:
            return 0
        if uz < 1.0 + self.half_pow:
            return 1
        return int(self.items * (self.eta * u - self.eta + 1) ** self.alpha)

    def probability(self, rank: int) -> float:
        """Exact probability that :meth:`from_uniform` yields ``rank`` for uniform u."""
        t1 = 1.0 / self.zetan
        t2 = (1.0 + self.half_pow) / self.zetan
        if rank == 0:
            return t1
        if rank == 1:
            return t2 - t1
        # rank r <=> r/n <= (eta*u - eta + 1)^alpha < (r+1)/n, for u >= t2
        e = 1 - self.theta

        def u_at(x: float) -> float:
            return (x ** e - 1 + self.eta) / self.eta

        lo = max(u_at(rank / self.items), t2)
        hi = min(u_at((rank + 1) / self.items), 1.0)
        return max(0.0, hi - lo)


class ScrambledZipfian:
    """YCSB's scrambled zipfian over [0, items): popular ranks scattered by FNV."""

    def __init__(self, items: int):
        self.items = items
        self.ranks = ZipfianRanks(ZIPF_ITEM_SPACE, ZIPF_THETA, ZIPF_ZETAN)

    def next(self, rng: XorShift64Star) -> int:
        return fnv1a64(self.ranks.from_uniform(rng.random())) % self.items

    def item_of_rank(self, rank: int) -> int:
        return fnv1a64(rank) % self.items


def key_for(recno: int) -> bytes:
    return b"user%d" % fnv1a64(recno)


def value_for(rng: XorShift64Star, nbytes: int) -> bytes:
    word = rng.next().to_bytes(8, "little")
    reps = -(-nbytes // 8)
    return (word * reps)[:nbytes]


# operation codes
READ = "read"
UPDATE = "update"
INSERT = "insert"
SCAN = "scan"
RMW = "rmw"

WORKLOADS = {
    # name: (read, update, insert, scan, read-modify-write)
    "load": (0.0, 0.0, 1.0, 0.0, 0.0),
    "a": (0.5, 0.5, 0.0, 0.0, 0.0),
    "b": (0.95, 0.05, 0.0, 0.0, 0.0),
    "c": (1.0, 0.0, 0.0, 0.0, 0.0),
    "e": (0.0, 0.0, 0.05, 0.95, 0.0),
    "f": (0.5, 0.0, 0.0, 0.0, 0.5),
}


@dataclass
class WorkloadSpec:
    name: str = "load"
    record_count: int = 100_000
    value_bytes: int = 128
    operation_count: int = 100_000
    scan_max_len: int = 100
    distribution: str = "zipfian"  # or "uniform"
    seed: int = 42
    threads: int = 1
    mix: tuple = field(init=False)

    def __post_init__(self):
        if self.name not in WORKLOADS:
            raise InvalidParameter(f"unknown workload {self.name!r}; choose from {sorted(WORKLOADS)}")
        if self.record_count < 1 or self.operation_count < 0 or self.threads < 1:
            raise InvalidParameter("record_count and threads must be >= 1, operation_count >= 0")
        if self.value_bytes < 1 or self.scan_max_len < 1:
            raise InvalidParameter("value_bytes and scan_max_len must be >= 1")
        if self.distribution not in ("zipfian", "uniform"):
            raise InvalidParameter("distribution must be zipfian or uniform")
        self.mix = WORKLOADS[self.name]

    @property
    def read_fraction(self) -> float:
        return self.mix[0]

    def with_name(self, name: str) -> "WorkloadSpec":
        return replace(self, name=name)


def load_ops(spec: WorkloadSpec, part: int = 0, parts: int = 1) -> Iterator[tuple]:
    """Insert records ``part, part+parts, ...`` of the initial load."""
    rng = XorShift64Star(spec.seed * 1_000_003 + part)
    for recno in range(part, spec.record_count, parts):
        yield INSERT, key_for(recno), value_for(rng, spec.value_bytes)


def run_ops(spec: WorkloadSpec, part: int = 0, parts: int = 1) -> Iterator[tuple]:
    """The operation stream of one driver thread.

    Inserts (workload E) draw fresh record numbers from a per-driver range
    beyond the loaded records so drivers never collide.
    """
    if spec.name == "load":
        yield from load_ops(spec, part, parts)
        return
    rng = XorShift64Star(spec.seed * 7_919 + 1 + part)
    chooser = ScrambledZipfian(spec.record_count) if spec.distribution == "zipfian" else None
    n = spec.operation_count // parts + (1 if part < spec.operation_count % parts else 0)
    cut_read, cut_update, cut_insert, cut_scan, _ = _cumulative(spec.mix)
    next_insert = spec.record_count + part
    for _ in range(n):
        r = rng.random()
        if r < cut_read:
            op = READ
        elif r < cut_update:
            op = UPDATE
        elif r < cut_insert:
            op = INSERT
        elif r < cut_scan:
            op = SCAN
        else:
            op = RMW
        if op == INSERT:
            yield INSERT, key_for(next_insert), value_for(rng, spec.value_bytes)
            next_insert += parts
            continue
        recno = chooser.next(rng) if chooser is not None else rng.below(spec.record_count)
        key = key_for(recno)
        if op == READ:
            yield READ, key, None
        elif op == SCAN:
            yield SCAN, key, rng.between(1, spec.scan_max_len)
        else:
            yield op, key, value_for(rng, spec.value_bytes)


def _cumulative(mix) -> list[float]:
    out, acc = [], 0.0
    for f in mix:
        acc += f
        out.append(acc)
    return out
