"""The public store: open/recover, point and range operations, χ retuning, stats.

Directory layout::

    CONFIG               JSON: format version plus the structural Config fields
    MANIFEST             checkpoint log (see ``manifest``)
    WAL                  write-ahead log (see ``wal``)
    pool-<bytes>.dat     one page pool per page size

Writes go to the WAL and the active memtable under one seq.  When the next
entry would push the memtable past ``batch_bytes`` it is finalized, pushed on
the deltas stack and applied to the pending tree; every χ batches the pending
tree is externalized, after which the stack is pruned and the WAL trimmed.
The pipeline runs synchronously on the writer that fills a memtable, so seq
order is preserved trivially.
"""

from __future__ import annotations

import heapq
import json
import os
import threading
from typing import Iterator

from .checkpoint import Checkpointer
from .errors import ContractViolation, InvalidArgument, InvalidParameter, OpenFailure
from .manifest import Manifest, RootInfo
from .memtable import DELETED, FOUND, DeltasStack, MemTable, lookup, merged_items
from .model import Config, StatsCounters, Update, entry_size
from .pagestore import PageStore
from .tree import FOUND as TREE_FOUND
from .wal import WriteAheadLog

FORMAT_VERSION = 1
CONFIG_FILE = "CONFIG"
MANIFEST_FILE = "MANIFEST"
WAL_FILE = "WAL"

# fields fixed at creation; everything else may change between opens
STRUCTURAL_FIELDS = (
    "node_page_bytes",
    "leaf_page_bytes",
    "shard_bytes",
    "pivot_capacity",
    "level_fanout",
    "max_key_bytes",
    "max_value_bytes",
    "leaf_capacity_bytes",
    "wal_block_bytes",
)


def _read_config(path: str) -> Config:
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, ValueError) as e:
        raise OpenFailure(f"unreadable CONFIG: {e}") from e
    if doc.get("version") != FORMAT_VERSION:
        raise OpenFailure(f"store format version {doc.get('version')} is not supported")
    return Config.from_dict(doc["config"])


def _write_config(path: str, config: Config) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump({"version": FORMAT_VERSION, "config": config.to_dict()}, f, indent=1)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


class KVStore:
    """An open store.  Use :meth:`open`; the constructor is internal."""

    def __init__(self, directory: str, config: Config, stats: StatsCounters, wal: WriteAheadLog,
                 manifest: Manifest, store: PageStore, ckpt: Checkpointer):
        self.directory = directory
        self.config = config
        self.counters = stats
        self.wal = wal
        self.manifest = manifest
        self.pages = store
        self.ckpt = ckpt
        self.active = MemTable()
        self.deltas = DeltasStack()
        self.peak_memory = 0
        self._lock = threading.RLock()
        self._closed = False
        ckpt.on_commit.append(self._on_commit)

    # -- lifecycle

    @classmethod
    def open(cls, directory: str, config: Config | None = None, chi: int | None = None,
             create: bool = True) -> "KVStore":
        """Create a store in ``directory`` or recover the one already there.

        On recovery the structural settings recorded at creation win; a
        ``config`` that disagrees on any of them is rejected.  ``chi`` (or
        ``config.chi``) is applied fresh on every open.
        """
        os.makedirs(directory, exist_ok=True)
        cfg_path = os.path.join(directory, CONFIG_FILE)
        man_path = os.path.join(directory, MANIFEST_FILE)
        wal_path = os.path.join(directory, WAL_FILE)
        stats = StatsCounters()
        fresh = not os.path.exists(man_path)
        if fresh:
            if not create:
                raise OpenFailure(f"no store in {directory}")
            config = config or Config()
            _write_config(cfg_path, config)
        else:
            stored = _read_config(cfg_path)
            if config is not None:
                diff = [f for f in STRUCTURAL_FIELDS if getattr(config, f) != getattr(stored, f)]
                if diff:
                    raise OpenFailure(f"config disagrees with the store on {', '.join(diff)}")
            else:
                config = stored
        if chi is not None:
            if chi < 1:
                raise InvalidParameter("chi must be >= 1")
            config.chi = chi

        store = PageStore(directory, config.shard_bytes, config.memory_budget_bytes, stats)
        if fresh:
            wal = WriteAheadLog.create(wal_path, config.wal_block_bytes, 0, stats)
            manifest = Manifest.create(man_path, config.manifest_compact_bytes, stats)
            durable, replay = RootInfo(), []
        else:
            manifest, state = Manifest.open(man_path, config.manifest_compact_bytes, stats)
            store.restore(state.refcounts, state.used)
            durable = state.root
            if os.path.exists(wal_path):
                wal, replay = WriteAheadLog.open(wal_path, config.wal_block_bytes,
                                                 durable.seq_upper_bound, stats)
            else:
                wal = WriteAheadLog.create(wal_path, config.wal_block_bytes,
                                           durable.seq_upper_bound, stats)
                replay = []
        wal.note_checkpoint(durable.seq_upper_bound)
        ckpt = Checkpointer(config, store, manifest, stats, durable, config.chi)
        kv = cls(directory, config, stats, wal, manifest, store, ckpt)
        for u in replay:
            kv._insert(u)
        if config.wal_flush_interval_ms > 0:
            wal.start_flusher(config.wal_flush_interval_ms / 1000.0)
        return kv

    def close(self, checkpoint: bool = True) -> None:
        """Flush the WAL and, by default, checkpoint everything so reopening is instant."""
        with self._lock:
            if self._closed:
                return
            if checkpoint:
                self._flush_locked()
            self.wal.close()
            self.manifest.close()
            self.pages.close()
            self._closed = True

    def abandon(self) -> None:
        """Drop the handle without flushing anything, as a crash would."""
        with self._lock:
            if self._closed:
                return
            self.wal.stop_flusher()
            for fd_owner in (self.wal, self.manifest):
                if fd_owner.fd is not None:
                    os.close(fd_owner.fd)
                    fd_owner.fd = None
            for p in self.pages.pools.values():
                os.close(p.fd)
            self.pages.pools.clear()
            self._closed = True

    def __enter__(self) -> "KVStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _check_open(self) -> None:
        if self._closed:
            raise ContractViolation("store is closed")

    # -- writes

    def _validate(self, key: bytes, value: bytes | None) -> None:
        if not isinstance(key, (bytes, bytearray)):
            raise InvalidArgument("keys must be bytes")
        if not 0 < len(key) <= self.config.max_key_bytes:
            raise InvalidArgument(f"key length must lie in [1, {self.config.max_key_bytes}]")
        if value is not None:
            if not isinstance(value, (bytes, bytearray)):
                raise InvalidArgument("values must be bytes")
            if len(value) > self.config.max_value_bytes:
                raise InvalidArgument(f"value longer than {self.config.max_value_bytes} bytes")

    def put(self, key: bytes, value: bytes) -> int:
        """Insert or overwrite; returns the update's seq."""
        if value is None:
            raise InvalidArgument("use delete() to remove a key")
        return self._write(key, value)

    def delete(self, key: bytes) -> int:
        return self._write(key, None)

    def _write(self, key: bytes, value: bytes | None) -> int:
        self._validate(key, value)
        key = bytes(key)
        value = bytes(value) if value is not None else None
        with self._lock:
            self._check_open()
            self._maybe_rotate(entry_size(key, value))
            seq = self.wal.append(key, value)
            self.active.insert(Update(key, value, seq))
            self.counters.record_user(len(key) + (len(value) if value is not None else 0))
            return seq

    def _insert(self, u: Update) -> None:
        """Replay path: the update is already in the WAL."""
        self._maybe_rotate(entry_size(u.key, u.value))
        self.active.insert(u)

    def _maybe_rotate(self, incoming: int) -> None:
        if len(self.active) and self.active.nbytes + incoming > self.config.batch_bytes:
            self._rotate()

    def _rotate(self) -> None:
        table = self.active
        batch = table.finalize(force=True)
        self.deltas.push(table)
        self.active = MemTable()
        self.ckpt.apply_batch(batch, seq_hi=table.max_seq)
        self._note_memory(table.nbytes)

    def _on_commit(self, info: RootInfo) -> None:
        self.deltas.prune(info.seq_upper_bound)
        self.wal.note_checkpoint(info.seq_upper_bound)
        self.wal.trim(info.seq_upper_bound)

    def flush(self) -> RootInfo:
        """Apply the active memtable and externalize the pending checkpoint."""
        with self._lock:
            self._check_open()
            return self._flush_locked()

    def _flush_locked(self) -> RootInfo:
        if len(self.active):
            self._rotate()
        if self.ckpt.dirty:
            return self.ckpt.externalize()
        return self.ckpt.durable

    def sync(self) -> int:
        """Make every buffered WAL record durable; returns the durable seq."""
        self._check_open()
        return self.wal.flush_blocks()

    def set_checkpoint_distance(self, chi: int) -> int:
        if not isinstance(chi, int) or isinstance(chi, bool) or chi < 1:
            raise InvalidParameter("checkpoint distance must be an integer >= 1")
        with self._lock:
            self._check_open()
            self.config.chi = chi
            return self.ckpt.set_checkpoint_distance(chi)

    @property
    def chi(self) -> int:
        return self.ckpt.chi

    @property
    def last_seq(self) -> int:
        return self.wal.last_assigned

    # -- reads

    def get(self, key: bytes) -> bytes | None:
        self._validate_key(key)
        with self._lock:
            self._check_open()
            status, value = lookup(self.active, self.deltas, key)
            if status == FOUND:
                return value
            if status == DELETED:
                return None
            res = self.ckpt.tree.point_query(bytes(key))
            return res.value if res.status == TREE_FOUND else None

    def contains(self, key: bytes) -> bool:
        self._validate_key(key)
        with self._lock:
            self._check_open()
            status, _ = lookup(self.active, self.deltas, key)
            if status == FOUND:
                return True
            if status == DELETED:
                return False
            return self.ckpt.tree.point_query(bytes(key), want_value=False).status == TREE_FOUND

    def _validate_key(self, key: bytes) -> None:
        if not isinstance(key, (bytes, bytearray)) or not key:
            raise InvalidArgument("keys must be non-empty bytes")

    def scan(self, start: bytes = b"", limit: int = 100) -> list[tuple[bytes, bytes]]:
        """Up to ``limit`` live pairs with key >= start, ascending."""
        if not isinstance(limit, int) or limit < 0:
            raise InvalidArgument("limit must be a non-negative integer")
        if not isinstance(start, (bytes, bytearray)):
            raise InvalidArgument("start must be bytes")
        out: list[tuple[bytes, bytes]] = []
        if limit == 0:
            return out
        with self._lock:
            self._check_open()
            for pair in self._iter(bytes(start)):
                out.append(pair)
                if len(out) >= limit:
                    break
        return out

    def _iter(self, start: bytes) -> Iterator[tuple[bytes, bytes]]:
        tables = (self.active, *self.deltas.tables)
        mem = ((k, 0, v) for k, v in merged_items(tables, start))
        tree = ((k, 1, v) for k, v in self.ckpt.tree.iter_from(start))
        last = None
        for k, _, v in heapq.merge(mem, tree):
            if k == last:
                continue
            last = k
            if v is not None:
                yield k, v

    def items(self) -> list[tuple[bytes, bytes]]:
        with self._lock:
            self._check_open()
            return list(self._iter(b""))

    # -- accounting

    def memory_bytes(self) -> int:
        """Cache plus pending-tree plus memtable bytes."""
        return (self.pages.cache.total + self.ckpt.resident_bytes()
                + self.active.nbytes + self.deltas.nbytes())

    def _note_memory(self, extra: int = 0) -> None:
        self.peak_memory = max(self.peak_memory, self.memory_bytes() + extra)

    def disk_bytes(self) -> int:
        """Live page bytes plus the on-disk footprint of the WAL and manifest."""
        wal_bytes = os.fstat(self.wal.fd).st_blocks * 512 if self.wal.fd is not None else 0
        return self.pages.live_bytes() + wal_bytes + self.manifest.size

    def stats(self, space: bool = True) -> dict:
        """Counter snapshot plus derived amplification figures.

        Space amplification needs a full scan, so pass ``space=False`` on hot
        paths.
        """
        with self._lock:
            snap = self.counters.snapshot()
            snap["write_amplification"] = self.counters.write_amplification
            snap["total_bytes_written"] = self.counters.total_bytes_written
            snap["chi"] = self.ckpt.chi
            snap["live_pages"] = self.pages.live_pages()
            snap["memory_bytes"] = self.memory_bytes() if not self._closed else 0
            snap["peak_memory_bytes"] = max(self.peak_memory, snap["memory_bytes"])
            if space and not self._closed:
                logical = sum(len(k) + len(v) for k, v in self._iter(b""))
                disk = self.disk_bytes()
                snap["logical_bytes"] = logical
                snap["disk_bytes"] = disk
                snap["space_amplification"] = disk / logical if logical else 0.0
            return snap
