"""Durable page pools, reference counts, sharded reads and the page cache.

One pool file per page size.  Page ids carry their size class in the top
bits, so an id alone locates its pool::

    page_id = log2(page_bytes) << 48 | slot

Only the used prefix of a page (rounded up to a shard) is written; the rest
of the slot reads back as zeros.  Reference counts live in memory and are
made durable by the checkpoint manifest, which is also what recovery uses to
rebuild the allocators; the bitmap in each pool file is advisory and only
refreshed on clean close.
"""

from __future__ import annotations

import heapq
import os
import struct
import threading
from collections import OrderedDict, defaultdict
from dataclasses import dataclass
from typing import Any, NamedTuple

from .errors import ContractViolation, IOFailure, OpenFailure, OutOfSpace, UseAfterFree
from .model import StatsCounters

POOL_MAGIC = b"TKPL"
POOL_VERSION = 1
_POOL_HDR = struct.Struct("<4sIIQ")
POOL_HEADER_BYTES = 4096
DEFAULT_POOL_CAPACITY = 1 << 20
SLOT_BITS = 48
SLOT_MASK = (1 << SLOT_BITS) - 1

PRIORITY_NODE = 3
PRIORITY_FILTER = 2
PRIORITY_LEAF = 1


def make_page_id(page_bytes: int, slot: int) -> int:
    return (page_bytes.bit_length() - 1) << SLOT_BITS | slot


def page_bytes_of(pid: int) -> int:
    return 1 << (pid >> SLOT_BITS)


def slot_of(pid: int) -> int:
    return pid & SLOT_MASK


class ShardKey(NamedTuple):
    page_id: int
    offset: int
    length: int


class PagePool:
    """A file of fixed-size page slots."""

    def __init__(self, path: str, page_bytes: int, capacity: int = DEFAULT_POOL_CAPACITY):
        self.path = path
        self.page_bytes = page_bytes
        self.capacity = capacity
        self._lock = threading.Lock()
        bitmap_bytes = (capacity + 7) // 8
        self.bitmap_bytes = -(-bitmap_bytes // 4096) * 4096
        self.data_offset = POOL_HEADER_BYTES + self.bitmap_bytes
        exists = os.path.exists(path)
        try:
            self.fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
        except OSError as e:
            raise IOFailure(f"cannot open pool {path}: {e}") from e
        if exists and os.fstat(self.fd).st_size >= _POOL_HDR.size:
            magic, version, pb, cap = _POOL_HDR.unpack(os.pread(self.fd, _POOL_HDR.size, 0))
            if magic != POOL_MAGIC or version != POOL_VERSION or pb != page_bytes:
                raise OpenFailure(f"pool {path}: bad header (magic/version/page size)")
            if cap != capacity:
                raise OpenFailure(f"pool {path}: capacity {cap} != {capacity}")
        else:
            os.pwrite(self.fd, _POOL_HDR.pack(POOL_MAGIC, POOL_VERSION, page_bytes, capacity), 0)
            os.ftruncate(self.fd, self.data_offset)
        self.high_water = 0
        self._free: list[int] = []
        self._live: set[int] = set()

    def reset_allocation(self, live_slots) -> None:
        """Rebuild the allocator from the set of live slots (recovery)."""
        self._live = set(live_slots)
        self.high_water = max(self._live) + 1 if self._live else 0
        self._free = [s for s in range(self.high_water) if s not in self._live]
        heapq.heapify(self._free)

    def allocate(self) -> int:
        with self._lock:
            if self._free:
                slot = heapq.heappop(self._free)
            else:
                if self.high_water >= self.capacity:
                    raise OutOfSpace(f"pool of {self.page_bytes}-byte pages is full")
                slot = self.high_water
                self.high_water += 1
            self._live.add(slot)
            return slot

    def release(self, slot: int) -> None:
        with self._lock:
            self._live.discard(slot)
            heapq.heappush(self._free, slot)

    def write(self, slot: int, data: bytes) -> None:
        try:
            n = os.pwrite(self.fd, data, self.data_offset + slot * self.page_bytes)
        except OSError as e:
            raise IOFailure(f"page write failed: {e}") from e
        if n != len(data):
            raise IOFailure("short page write")

    def read(self, slot: int, offset: int, length: int) -> bytes:
        try:
            return os.pread(self.fd, length, self.data_offset + slot * self.page_bytes + offset)
        except OSError as e:
            raise IOFailure(f"page read failed: {e}") from e

    def sync(self) -> None:
        try:
            os.fsync(self.fd)
        except OSError as e:
            raise IOFailure(f"pool sync failed: {e}") from e

    def write_bitmap(self) -> None:
        bits = bytearray(self.bitmap_bytes)
        for s in self._live:
            bits[s >> 3] |= 1 << (s & 7)
        os.pwrite(self.fd, bytes(bits), POOL_HEADER_BYTES)

    def file_bytes(self) -> int:
        return os.fstat(self.fd).st_size

    def close(self) -> None:
        os.close(self.fd)


@dataclass
class CacheEntry:
    data: bytes
    priority: int
    klass: int
    size: int
    obj: Any = None
    pins: int = 0


class PageCache:
    """Priority CLOCK.

    Each entry carries a priority set from its class on insert and on every
    hit.  The hand walks the ring; a pinned entry is skipped, an entry with
    positive priority is decremented and skipped, and the first unpinned
    entry at priority zero is evicted.  The ring is an ``OrderedDict`` whose
    front is the hand position.
    """

    def __init__(self, budget_bytes: int, stats: StatsCounters | None = None):
        self.budget = budget_bytes
        self.stats = stats
        self.ring: OrderedDict[ShardKey, CacheEntry] = OrderedDict()
        self.by_page: dict[int, set] = defaultdict(set)
        self.total = 0
        self.hits = defaultdict(int)
        self.misses = defaultdict(int)
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return len(self.ring)

    def get(self, key: ShardKey) -> CacheEntry | None:
        with self._lock:
            e = self.ring.get(key)
            if e is None:
                return None
            e.priority = e.klass
            self.hits[e.klass] += 1
            return e

    def put(self, key: ShardKey, data: bytes, klass: int, obj: Any = None, obj_size: int = 0) -> CacheEntry:
        with self._lock:
            old = self.ring.pop(key, None)
            if old is not None:
                self.total -= old.size
            e = CacheEntry(data, klass, klass, len(data) + obj_size, obj)
            if old is not None:
                e.pins = old.pins
            self.ring[key] = e
            self.by_page[key.page_id].add(key)
            self.total += e.size
            self._shrink()
            return e

    def attach(self, key: ShardKey, obj: Any, obj_size: int) -> None:
        """Memoize a decoded object on an existing entry."""
        with self._lock:
            e = self.ring.get(key)
            if e is None or e.obj is not None:
                return
            e.obj = obj
            e.size += obj_size
            self.total += obj_size
            self._shrink()

    def pin(self, key: ShardKey) -> None:
        with self._lock:
            self.ring[key].pins += 1

    def unpin(self, key: ShardKey) -> None:
        with self._lock:
            e = self.ring[key]
            if e.pins <= 0:
                raise ContractViolation("unpin of an unpinned entry")
            e.pins -= 1

    def evict_step(self) -> ShardKey | None:
        """Advance the hand until one entry is evicted; None if all are pinned."""
        with self._lock:
            unpinned = sum(1 for e in self.ring.values() if not e.pins)
            if not unpinned:
                for _ in range(len(self.ring)):
                    k = next(iter(self.ring))
                    self.ring.move_to_end(k)
                return None
            while True:
                key, e = next(iter(self.ring.items()))
                if e.pins or e.priority > 0:
                    if not e.pins:
                        e.priority -= 1
                    self.ring.move_to_end(key)
                    continue
                self._drop(key)
                return key

    def _drop(self, key: ShardKey) -> None:
        e = self.ring.pop(key)
        self.total -= e.size
        keys = self.by_page.get(key.page_id)
        if keys is not None:
            keys.discard(key)
            if not keys:
                del self.by_page[key.page_id]

    def _shrink(self) -> None:
        while self.total > self.budget:
            if self.evict_step() is None:
                break

    def invalidate_page(self, page_id: int) -> None:
        with self._lock:
            for key in list(self.by_page.get(page_id, ())):
                self._drop(key)

    def clear(self) -> None:
        with self._lock:
            self.ring.clear()
            self.by_page.clear()
            self.total = 0


class PageStore:
    """Pools keyed by page size plus refcounts and the shared cache."""

    def __init__(self, directory: str, shard_bytes: int, cache_bytes: int,
                 stats: StatsCounters | None = None, capacity: int = DEFAULT_POOL_CAPACITY):
        self.directory = directory
        self.shard_bytes = shard_bytes
        self.capacity = capacity
        self.stats = stats if stats is not None else StatsCounters()
        self.cache = PageCache(cache_bytes, self.stats)
        self.pools: dict[int, PagePool] = {}
        self.refcounts: dict[int, int] = {}
        self.used: dict[int, int] = {}
        self.kinds: dict[int, str] = {}
        self._lock = threading.RLock()
        for name in sorted(os.listdir(directory)):
            if name.startswith("pool-") and name.endswith(".dat"):
                self.pool(int(name[5:-4]))

    def pool(self, page_bytes: int) -> PagePool:
        p = self.pools.get(page_bytes)
        if p is None:
            path = os.path.join(self.directory, f"pool-{page_bytes}.dat")
            p = self.pools[page_bytes] = PagePool(path, page_bytes, self.capacity)
        return p

    # -- lifetime

    def write_page(self, page_bytes: int, data: bytes, kind: str = "page") -> int:
        """Allocate a slot, write ``data`` (at most one page) and return its id.

        The new page starts with a reference count of one.
        """
        if len(data) > page_bytes:
            raise ContractViolation(f"{len(data)} bytes exceed page size {page_bytes}")
        pool = self.pool(page_bytes)
        slot = pool.allocate()
        pid = make_page_id(page_bytes, slot)
        shard = min(self.shard_bytes, page_bytes)
        used = -(-len(data) // shard) * shard
        if used != len(data):
            data = data + bytes(used - len(data))
        try:
            pool.write(slot, data)
        except IOFailure:
            pool.release(slot)
            raise
        with self._lock:
            self.refcounts[pid] = 1
            self.used[pid] = used
            self.kinds[pid] = kind
        self.stats.record_write(kind, used)
        return pid

    def restore(self, refcounts: dict[int, int], used: dict[int, int]) -> None:
        """Install recovered counts and rebuild every pool's allocator."""
        self.refcounts = {p: c for p, c in refcounts.items() if c > 0}
        self.used = {p: used.get(p, page_bytes_of(p)) for p in self.refcounts}
        by_pool: dict[int, list[int]] = defaultdict(list)
        for pid in self.refcounts:
            by_pool[page_bytes_of(pid)].append(slot_of(pid))
        for pb in set(by_pool) | set(self.pools):
            self.pool(pb).reset_allocation(by_pool.get(pb, ()))

    def is_live(self, pid: int) -> bool:
        return self.refcounts.get(pid, 0) > 0

    def incref(self, pid: int) -> int:
        with self._lock:
            if not self.is_live(pid):
                raise UseAfterFree(f"incref of dead page {pid:#x}")
            self.refcounts[pid] += 1
            return self.refcounts[pid]

    def decref(self, pid: int) -> int:
        with self._lock:
            c = self.refcounts.get(pid, 0)
            if c <= 0:
                raise ContractViolation(f"decref of dead page {pid:#x}")
            c -= 1
            if c:
                self.refcounts[pid] = c
            else:
                self._free(pid)
            return c

    def apply_delta(self, pid: int, delta: int) -> int:
        with self._lock:
            c = self.refcounts.get(pid, 0) + delta
            if c < 0:
                raise ContractViolation(f"refcount of {pid:#x} would go negative")
            if c:
                self.refcounts[pid] = c
            elif pid in self.refcounts:
                self._free(pid)
            return c

    def _free(self, pid: int) -> None:
        self.refcounts.pop(pid, None)
        self.used.pop(pid, None)
        self.kinds.pop(pid, None)
        self.pool(page_bytes_of(pid)).release(slot_of(pid))
        self.cache.invalidate_page(pid)

    def sync(self) -> None:
        for p in self.pools.values():
            p.sync()

    # -- reads

    def _device_read(self, pid: int, offset: int, length: int, kind: str) -> bytes:
        if not self.is_live(pid):
            raise UseAfterFree(f"read of dead page {pid:#x}")
        pb = page_bytes_of(pid)
        if offset < 0 or offset + length > pb:
            raise ContractViolation("read beyond page end")
        used = self.used.get(pid, pb)
        n = max(0, min(length, used - offset))
        data = self.pool(pb).read(slot_of(pid), offset, n) if n else b""
        if len(data) < length:
            data = data + bytes(length - len(data))
        self.stats.record_read(kind, length)
        return data

    def read_shard(self, key: ShardKey, klass: int = PRIORITY_LEAF, kind: str = "leaf") -> CacheEntry:
        """Read one aligned slice of a page through the cache."""
        if key.offset % self.shard_bytes and key.offset:
            raise ContractViolation("shard offset must be shard-aligned")
        e = self.cache.get(key)
        if e is not None:
            self.stats.add("cache_hits")
            return e
        self.stats.add("cache_misses")
        data = self._device_read(key.page_id, key.offset, key.length, kind)
        if kind in ("leaf", "segment"):
            self.stats.add("shard_reads")
            self.stats.add("shard_bytes_read", key.length)
        return self.cache.put(key, data, klass)

    def read_page(self, pid: int, klass: int, kind: str) -> CacheEntry:
        """Whole used prefix of a page as one cache entry."""
        if not self.is_live(pid):
            raise UseAfterFree(f"read of dead page {pid:#x}")
        return self.read_shard(ShardKey(pid, 0, self.used[pid]), klass, kind)

    def read_range(self, pid: int, offset: int, length: int, kind: str = "leaf") -> bytes:
        """Bytes [offset, offset+length) assembled from shard-sized cache entries."""
        sb = self.shard_bytes
        first = offset // sb
        last = (offset + length - 1) // sb
        parts = []
        for s in range(first, last + 1):
            parts.append(self.read_shard(ShardKey(pid, s * sb, sb), PRIORITY_LEAF, kind).data)
        blob = b"".join(parts) if len(parts) > 1 else parts[0]
        a = offset - first * sb
        return blob[a:a + length]

    # -- accounting

    def live_bytes(self) -> int:
        return sum(self.used.values())

    def live_pages(self) -> int:
        return len(self.refcounts)

    def close(self) -> None:
        for p in self.pools.values():
            p.write_bitmap()
            p.sync()
            p.close()
        self.pools.clear()
        self.cache.clear()
