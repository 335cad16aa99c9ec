"""Shared domain types: updates, sorted runs, configuration and counters.

A *run* is a key-sorted sequence of unique keys.  Runs are stored as two
parallel lists: ``keys`` and ``cells``, where each cell is the tuple
``(value, seq, nbytes)``.  ``value`` is ``None`` for a tombstone and
``nbytes`` is the encoded size of the entry (key + value + fixed record
overhead).  Cells are never copied once created; merges only shuffle
references, which is what keeps the in-memory checkpoint window cheap.
"""

from __future__ import annotations

import math
import threading
from bisect import bisect_left
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from itertools import accumulate, groupby
from operator import itemgetter
from typing import Iterable, Iterator, NamedTuple, Sequence

from .errors import ContractViolation, EmptyBatch, InvalidParameter

# key_len u16, flags u8, val_len u32, seq u64, val_off u32
ENTRY_OVERHEAD = 19
MAX_KEY_BYTES = 1024

_nbytes = itemgetter(2)


class Update(NamedTuple):
    key: bytes
    value: bytes | None  # None marks a tombstone
    seq: int

    @property
    def is_tombstone(self) -> bool:
        return self.value is None


def entry_size(key: bytes, value: bytes | None) -> int:
    return ENTRY_OVERHEAD + len(key) + (len(value) if value is not None else 0)


def make_cell(key: bytes, value: bytes | None, seq: int) -> tuple:
    return (value, seq, ENTRY_OVERHEAD + len(key) + (len(value) if value is not None else 0))


class Run:
    """Immutable key-sorted run with unique keys."""

    __slots__ = ("keys", "cells", "_cum")

    def __init__(self, keys: list[bytes] | None = None, cells: list[tuple] | None = None):
        self.keys = keys if keys is not None else []
        self.cells = cells if cells is not None else []
        self._cum: list[int] | None = None

    @classmethod
    def from_updates(cls, updates: Iterable[Update]) -> "Run":
        """Build from already sorted, unique updates (no checks beyond ordering)."""
        keys, cells = [], []
        for u in updates:
            keys.append(u.key)
            cells.append(make_cell(u.key, u.value, u.seq))
        run = cls(keys, cells)
        run.check_sorted()
        return run

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[bytes, bytes | None]], seq: int = 0) -> "Run":
        return cls.from_updates(Update(k, v, seq) for k, v in pairs)

    def __len__(self) -> int:
        return len(self.keys)

    def __bool__(self) -> bool:
        return bool(self.keys)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Run):
            return NotImplemented
        return self.keys == other.keys and self.cells == other.cells

    def __repr__(self) -> str:
        return f"Run({len(self.keys)} entries, {self.nbytes} bytes)"

    @property
    def cum(self) -> list[int]:
        """Prefix sums of entry sizes; ``cum[i]`` is the size of entries ``[0, i)``."""
        if self._cum is None:
            self._cum = [0, *accumulate(map(_nbytes, self.cells))]
        return self._cum

    @property
    def nbytes(self) -> int:
        return self.cum[-1]

    def bytes_between(self, lo: int, hi: int) -> int:
        cum = self.cum
        return cum[hi] - cum[lo]

    @property
    def entries(self) -> list[Update]:
        return [Update(k, c[0], c[1]) for k, c in zip(self.keys, self.cells)]

    def __iter__(self) -> Iterator[Update]:
        return iter(self.entries)

    def pairs(self) -> list[tuple[bytes, bytes | None]]:
        return [(k, c[0]) for k, c in zip(self.keys, self.cells)]

    def slice(self, lo: int, hi: int) -> "Run":
        if lo <= 0 and hi >= len(self.keys):
            return self
        return Run(self.keys[lo:hi], self.cells[lo:hi])

    def lookup(self, key: bytes) -> tuple | None:
        i = bisect_left(self.keys, key)
        if i < len(self.keys) and self.keys[i] == key:
            return self.cells[i]
        return None

    @property
    def max_seq(self) -> int:
        return max((c[1] for c in self.cells), default=0)

    def has_tombstones(self) -> bool:
        return any(c[0] is None for c in self.cells)

    def without_tombstones(self) -> "Run":
        if not self.has_tombstones():
            return self
        keys, cells = [], []
        for k, c in zip(self.keys, self.cells):
            if c[0] is not None:
                keys.append(k)
                cells.append(c)
        return Run(keys, cells)

    def check_sorted(self) -> None:
        keys = self.keys
        for a, b in zip(keys, keys[1:]):
            if not a < b:
                raise ContractViolation(f"run not strictly ascending at {a!r} >= {b!r}")

    def split_by_bytes(self, parts: int) -> list["Run"]:
        """Cut into at most ``parts`` pieces of roughly equal encoded size."""
        n = len(self.keys)
        if parts <= 1 or n <= 1:
            return [self]
        parts = min(parts, n)
        cum = self.cum
        total = cum[-1]
        cuts = [0]
        for j in range(1, parts):
            target = total * j / parts
            i = bisect_left(cum, target, cuts[-1] + 1, n)
            # choose the boundary closest to the target
            if i > cuts[-1] + 1 and target - cum[i - 1] < cum[i] - target:
                i -= 1
            i = max(i, cuts[-1] + 1)
            if i >= n:
                break
            cuts.append(i)
        cuts.append(n)
        return [self.slice(a, b) for a, b in zip(cuts, cuts[1:])]


Batch = Run


def make_batch(updates: Sequence[Update]) -> Run:
    """Sort and de-duplicate updates; the highest seq wins per key.

    Tombstones are kept, they only disappear when merged into a leaf.
    """
    if not updates:
        raise EmptyBatch("make_batch needs at least one update")
    ordered = sorted(updates, key=lambda u: u.seq)
    for a, b in zip(ordered, ordered[1:]):
        if a.seq == b.seq:
            raise ContractViolation(f"duplicate seq {a.seq}")
    newest: dict[bytes, Update] = {}
    for u in ordered:
        newest[u.key] = u
    keys = sorted(newest)
    return Run(keys, [make_cell(k, newest[k].value, newest[k].seq) for k in keys])


def merge_runs(
    runs: Sequence[Run],
    drop_tombstones: bool = False,
    ranks: Sequence[int] | None = None,
    check: bool = True,
) -> Run:
    """Merge sorted runs, newest-wins per key.

    ``ranks[i]`` is the recency rank of ``runs[i]`` (lower is newer); by
    default the position in ``runs`` is the rank, so ``runs[0]`` is newest.
    Runs of equal rank are resolved by seq.
    """
    if ranks is None:
        ranks = range(len(runs))
    if len(ranks) != len(runs):
        raise ContractViolation("ranks and runs differ in length")
    if check:
        for r in runs:
            r.check_sorted()
    live = [(rank, r) for rank, r in zip(ranks, runs) if r.keys]
    if not live:
        return Run()
    if len(live) == 1:
        out = live[0][1]
    else:
        live.sort(key=lambda t: -t[0])  # oldest first, later updates overwrite
        table: dict[bytes, tuple] = {}
        for _, group in groupby(live, key=itemgetter(0)):
            group = [r for _, r in group]
            if len(group) == 1:
                table.update(zip(group[0].keys, group[0].cells))
                continue
            tied: dict[bytes, tuple] = {}
            for r in group:
                for k, c in zip(r.keys, r.cells):
                    old = tied.get(k)
                    if old is None or c[1] > old[1]:
                        tied[k] = c
            table.update(tied)
        keys = sorted(table)
        out = Run(keys, list(map(table.__getitem__, keys)))
    return out.without_tombstones() if drop_tombstones else out


# ---------------------------------------------------------------------------
# configuration


@dataclass
class Config:
    node_page_bytes: int = 4096
    leaf_page_bytes: int = 64 * 1024
    block_bytes: int = 4096
    pivot_capacity: int = 16
    level_fanout: int = 2
    chi: int = 1
    memory_budget_bytes: int = 64 * 1024 * 1024
    filter_bits_per_key: float = 10.0
    filter_fp_rate: float = 0.01
    worker_threads: int = 1
    wal_block_bytes: int = 64 * 1024
    wal_flush_interval_ms: float = 1.0
    shard_bytes: int = 4096
    max_key_bytes: int = 128
    max_value_bytes: int = 2048
    memtable_bytes: int | None = None  # defaults to leaf_capacity
    leaf_capacity_bytes: int | None = None  # defaults to 3/4 of a leaf page
    leaf_filters: bool = True
    manifest_compact_bytes: int = 4 * 1024 * 1024

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.pivot_capacity < 4:
            raise InvalidParameter("pivot_capacity must be >= 4")
        if self.pivot_capacity > 64:
            raise InvalidParameter("pivot_capacity above 64 is not supported by the node format")
        if self.level_fanout != 2:
            raise InvalidParameter("level_fanout is fixed at 2")
        if self.chi < 1:
            raise InvalidParameter("chi must be >= 1")
        if not 0 < self.filter_fp_rate < 1:
            raise InvalidParameter("filter_fp_rate must lie in (0, 1)")
        if not 1 <= self.max_key_bytes <= MAX_KEY_BYTES:
            raise InvalidParameter(f"max_key_bytes must lie in [1, {MAX_KEY_BYTES}]")
        if self.shard_bytes <= 0 or self.leaf_page_bytes % self.shard_bytes:
            raise InvalidParameter("leaf_page_bytes must be a multiple of shard_bytes")
        largest = self.max_entry_bytes
        if 16 * largest > self.leaf_page_bytes:
            raise InvalidParameter("leaf_page_bytes must hold at least sixteen maximal entries")
        if self.leaf_capacity < 2 * largest and self.leaf_capacity_bytes is None:
            raise InvalidParameter("leaf capacity too small for two maximal entries")
        if self.leaf_capacity + 2 * largest > self.leaf_page_bytes * 7 // 8:
            raise InvalidParameter("leaf_capacity_bytes leaves no room for the page index")
        if largest + 64 > self.wal_block_bytes:
            raise InvalidParameter("wal_block_bytes too small for a maximal record")
        # worst-case node: every pivot key (and the upper bound) maximal, every
        # segment slot used with a flushed bound for each pivot
        pivot_bytes = (self.pivot_capacity + 1) * (self.max_key_bytes + 2 + 21)
        seg_bytes = (self.pivot_capacity - 1) * (17 + 5 * self.pivot_capacity)
        if 16 + pivot_bytes + seg_bytes > self.node_page_bytes:
            raise InvalidParameter(
                "node_page_bytes cannot hold pivot_capacity pivots of max_key_bytes keys"
            )

    @property
    def levels(self) -> int:
        return math.ceil(math.log2(self.pivot_capacity))

    @property
    def level_caps(self) -> list[int]:
        """Segment capacity per buffer level; the last level absorbs the slack."""
        caps, left = [], self.pivot_capacity - 1
        for i in range(self.levels):
            c = min(2**i, left)
            caps.append(c)
            left -= c
        return caps

    @property
    def max_entry_bytes(self) -> int:
        return ENTRY_OVERHEAD + self.max_key_bytes + self.max_value_bytes

    @property
    def leaf_capacity(self) -> int:
        """Entry bytes one leaf or segment page holds (the tree's L).

        The rest of the page is reserved for the header, the sparse index and
        shard-alignment padding.
        """
        if self.leaf_capacity_bytes is not None:
            return self.leaf_capacity_bytes
        return self.leaf_page_bytes * 3 // 4

    @property
    def batch_bytes(self) -> int:
        return self.memtable_bytes or self.leaf_capacity

    @property
    def filter_bits(self) -> float:
        """Bits per key: the configured rate, raised if needed to reach filter_fp_rate."""
        return max(self.filter_bits_per_key, -math.log(self.filter_fp_rate) / math.log(2) ** 2)

    @property
    def filter_page_bytes(self) -> int:
        max_keys = self.leaf_capacity // (ENTRY_OVERHEAD + 1)
        need = 32 + math.ceil(max_keys * self.filter_bits / 8)
        size = max(4096, 1 << (need - 1).bit_length())
        return size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


# ---------------------------------------------------------------------------
# instrumentation


@dataclass
class StatsCounters:
    """Monotone counters shared by every layer; increments take a lock."""

    user_bytes_in: int = 0
    n_keys: int = 0
    pages_written: dict = field(default_factory=lambda: defaultdict(int))
    bytes_written: dict = field(default_factory=lambda: defaultdict(int))
    pages_read: dict = field(default_factory=lambda: defaultdict(int))
    bytes_read: dict = field(default_factory=lambda: defaultdict(int))
    shard_reads: int = 0
    shard_bytes_read: int = 0
    filter_negative_hits: int = 0
    cache_hits: int = 0
    cache_misses: int = 0
    checkpoints: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add(self, name: str, amount: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + amount)

    def add_pool(self, name: str, pool: str, amount: int = 1) -> None:
        with self._lock:
            getattr(self, name)[pool] += amount

    def record_write(self, pool: str, nbytes: int) -> None:
        with self._lock:
            self.pages_written[pool] += 1
            self.bytes_written[pool] += nbytes

    def record_read(self, pool: str, nbytes: int) -> None:
        with self._lock:
            self.pages_read[pool] += 1
            self.bytes_read[pool] += nbytes

    def record_user(self, nbytes: int) -> None:
        with self._lock:
            self.user_bytes_in += nbytes
            self.n_keys += 1

    @property
    def total_bytes_written(self) -> int:
        return sum(self.bytes_written.values())

    @property
    def write_amplification(self) -> float:
        if self.user_bytes_in == 0:
            return 0.0
        return self.total_bytes_written / self.user_bytes_in

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "user_bytes_in": self.user_bytes_in,
                "n_keys": self.n_keys,
                "pages_written": dict(self.pages_written),
                "bytes_written": dict(self.bytes_written),
                "pages_read": dict(self.pages_read),
                "bytes_read": dict(self.bytes_read),
                "shard_reads": self.shard_reads,
                "shard_bytes_read": self.shard_bytes_read,
                "filter_negative_hits": self.filter_negative_hits,
                "cache_hits": self.cache_hits,
                "cache_misses": self.cache_misses,
                "checkpoints": self.checkpoints,
                "total_bytes_written": sum(self.bytes_written.values()),
                "write_amplification": (
                    sum(self.bytes_written.values()) / self.user_bytes_in
                    if self.user_bytes_in
                    else 0.0
                ),
                "write_amplification_defined": self.user_bytes_in > 0,
            }
