"""In-memory ordered index of recent updates and the stack of finalized tables."""

from __future__ import annotations

import heapq
import threading
from typing import Iterator

from sortedcontainers import SortedDict

from .errors import ContractViolation
from .model import ENTRY_OVERHEAD, Run, Update, make_cell

FOUND = "found"
DELETED = "deleted"
FALLTHROUGH = "fallthrough"


class MemTable:
    """Key -> (value, seq); a ``None`` value is a tombstone."""

    def __init__(self):
        self.index: SortedDict = SortedDict()
        self.nbytes = 0
        self.finalized = False
        self.min_seq = 0
        self.max_seq = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.index)

    def insert(self, update: Update) -> bool:
        """Upsert unless an entry with a newer seq exists; returns True if applied."""
        key, value, seq = update
        with self._lock:
            if self.finalized:
                raise ContractViolation("insert into a finalized memtable")
            old = self.index.get(key)
            if old is not None:
                if old[1] >= seq:
                    return False
                self.nbytes -= ENTRY_OVERHEAD + len(key) + (len(old[0]) if old[0] is not None else 0)
            self.index[key] = (value, seq)
            self.nbytes += ENTRY_OVERHEAD + len(key) + (len(value) if value is not None else 0)
            if not self.min_seq or seq < self.min_seq:
                self.min_seq = seq
            self.max_seq = max(self.max_seq, seq)
            return True

    def lookup(self, key: bytes) -> tuple | None:
        return self.index.get(key)

    def items_from(self, start: bytes) -> Iterator[tuple[bytes, tuple]]:
        """(key, (value, seq)) for keys >= start, ascending."""
        index = self.index
        for k in index.irange(minimum=start):
            yield k, index[k]

    def finalize(self, force: bool = False) -> Run:
        """Freeze the table and return its contents as a sorted, unique batch."""
        with self._lock:
            if self.finalized:
                raise ContractViolation("memtable already finalized")
            if not self.index and not force:
                raise ContractViolation("finalizing an empty memtable requires force")
            self.finalized = True
        keys = list(self.index.keys())
        cells = [make_cell(k, v, s) for k, (v, s) in zip(keys, self.index.values())]
        return Run(keys, cells)


class DeltasStack:
    """Finalized tables whose batches are not yet covered by a durable checkpoint.

    ``tables`` is replaced wholesale on push and prune so a reader that grabbed
    the list keeps a consistent snapshot.
    """

    def __init__(self):
        self.tables: tuple[MemTable, ...] = ()

    def __len__(self) -> int:
        return len(self.tables)

    def push(self, table: MemTable) -> None:
        if not table.finalized:
            raise ContractViolation("only finalized tables go on the deltas stack")
        self.tables = (table, *self.tables)

    def prune(self, upto_seq: int | None = None) -> int:
        """Drop tables whose updates are all <= upto_seq (all tables if None)."""
        before = len(self.tables)
        if upto_seq is None:
            self.tables = ()
        else:
            self.tables = tuple(t for t in self.tables if t.max_seq > upto_seq)
        return before - len(self.tables)

    def nbytes(self) -> int:
        return sum(t.nbytes for t in self.tables)


def lookup(active: MemTable | None, stack: DeltasStack, key: bytes) -> tuple[str, bytes | None]:
    """Newest memtable state of ``key``: (FOUND, value), (DELETED, None) or (FALLTHROUGH, None)."""
    tables = stack.tables
    if active is not None:
        tables = (active, *tables)
    for t in tables:
        hit = t.index.get(key)
        if hit is not None:
            if hit[0] is None:
                return DELETED, None
            return FOUND, hit[0]
    return FALLTHROUGH, None


def merged_items(tables, start: bytes) -> Iterator[tuple[bytes, bytes | None]]:
    """Newest-wins merge over tables ordered newest first; tombstones included."""
    def ranked(t: MemTable, rank: int):
        for k, (v, _) in t.items_from(start):
            yield k, rank, v

    iters = [ranked(t, rank) for rank, t in enumerate(tables)]
    last = None
    for k, _, v in heapq.merge(*iters):
        if k == last:
            continue
        last = k
        yield k, v
