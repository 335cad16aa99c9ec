"""Checkpoint distance management and externalization.

Batches are applied to an in-memory pending tree.  Every ``chi`` batches the
pending tree is externalized: dirty leaves, segments and nodes are encoded
and written bottom-up, then the new root and all reference-count changes are
committed through the manifest in two phases.  Pages created and superseded
inside one window never reach storage.
"""

from __future__ import annotations

from bisect import bisect_left
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable

from .amq import BloomFilter, bits_per_key_for
from .errors import InvalidParameter
from .layout import (
    KIND_LEAF,
    KIND_SEGMENT,
    NODE_MAGIC,
    NodeRecord,
    SparseIndex,
    _layout,
    choose_stride,
    decode_data_header,
    decode_data_page,
    decode_node,
    decode_sparse_index,
    encode_data_page,
    encode_node,
    iter_records,
)
from .manifest import Manifest, RootInfo
from .model import ENTRY_OVERHEAD, Config, Run, StatsCounters
from .pagestore import (
    PRIORITY_FILTER,
    PRIORITY_LEAF,
    PRIORITY_NODE,
    PageStore,
    ShardKey,
)
from .tree import LEAF, NODE, LeafPage, NodePage, PageStub, Segment, SegmentPage, TurtleTree

ROOT_EMPTY = 0

# decoded runs take roughly this multiple of their encoded size in memory
DECODED_OVERHEAD = 2


def build_leaf_index(leaf: LeafPage, shard_bytes: int = 4096) -> SparseIndex:
    """Sparse index over every 16th key, or every 32nd if that does not fit."""
    run = leaf.run
    stride = choose_stride(run, shard_bytes)
    group_off = _layout(run, stride, shard_bytes, True)[6]
    keys = [run.keys[i] for i in range(0, len(run), stride)]
    return SparseIndex(stride, keys, list(range(0, len(run), stride)), group_off)


def build_leaf_filter(leaf: LeafPage, fp_rate: float) -> BloomFilter:
    return BloomFilter.build(leaf.run.keys, bits_per_key_for(fp_rate))


class PageReader:
    """Resolves durable page references for the tree."""

    def __init__(self, store: PageStore, config: Config, stats: StatsCounters):
        self.store = store
        self.config = config
        self.stats = stats
        self.shard = config.shard_bytes

    # -- whole pages

    def node_record(self, pid: int) -> NodeRecord:
        e = self.store.read_page(pid, PRIORITY_NODE, "node")
        if e.obj is None:
            rec = decode_node(e.data)
            self.store.cache.attach(ShardKey(pid, 0, len(e.data)), rec, len(e.data))
            return rec
        return e.obj

    def load_node(self, pid: int) -> NodePage:
        rec = self.node_record(pid)
        children = [PageStub(kind, cid, fid or None) for kind, cid, fid in rec.children]
        levels = [
            [Segment(SegmentPage(None, spid), active, dict(fl)) for spid, active, fl in level]
            for level in rec.levels
        ]
        return NodePage(list(rec.pivots), children, len(levels), levels=levels,
                        pending=list(rec.pending), page_id=pid, upper=rec.upper)

    def _run(self, pid: int, kind: str) -> Run:
        e = self.store.read_page(pid, PRIORITY_LEAF, kind)
        if not isinstance(e.obj, Run):
            _, run = decode_data_page(e.data)
            self.store.cache.attach(ShardKey(pid, 0, len(e.data)), run, DECODED_OVERHEAD * len(e.data))
            return run
        return e.obj

    def load_segment(self, pid: int) -> Run:
        return self._run(pid, "segment")

    def load_leaf(self, stub: PageStub) -> LeafPage:
        return LeafPage(self._run(stub.page_id, "leaf"), stub.page_id, stub.filter_id)

    def load_child(self, stub: PageStub):
        if stub.kind == NODE:
            return self.load_node(stub.page_id)
        return self.load_leaf(stub)

    def filter(self, fid: int) -> BloomFilter:
        e = self.store.read_page(fid, PRIORITY_FILTER, "filter")
        if e.obj is None:
            f = BloomFilter.decode(e.data)
            self.store.cache.attach(ShardKey(fid, 0, len(e.data)), f, len(f.bits))
            return f
        return e.obj

    def _memo_run(self, pid: int) -> Run | None:
        used = self.store.used.get(pid)
        if used is None:
            return None
        e = self.store.cache.get(ShardKey(pid, 0, used))
        return e.obj if e is not None and isinstance(e.obj, Run) else None

    # -- sharded probes

    def _header(self, pid: int, kind: str):
        e = self.store.read_shard(ShardKey(pid, 0, self.shard), PRIORITY_LEAF, kind)
        if not isinstance(e.obj, tuple):
            hdr = decode_data_header(e.data)
            if hdr.index_end <= self.shard:
                idx = decode_sparse_index(hdr, e.data)
            else:
                idx = decode_sparse_index(hdr, self.store.read_range(pid, 0, hdr.index_end, kind))
            obj = (hdr, idx)
            self.store.cache.attach(ShardKey(pid, 0, self.shard), obj,
                                    hdr.index_len * DECODED_OVERHEAD)
            return obj
        return e.obj

    def probe(self, pid: int, key: bytes, kind: str, want_value: bool = True):
        """(entry index, cell) for ``key`` using only the shards it needs."""
        run = self._memo_run(pid)
        if run is not None:
            i = bisect_left(run.keys, key)
            if i < len(run) and run.keys[i] == key:
                return i, run.cells[i]
            return None
        hdr, idx = self._header(pid, kind)
        g = idx.group_for(key)
        if g is None:
            return None
        start = idx.offsets[g]
        end = idx.offsets[g + 1] if g + 1 < len(idx.offsets) else hdr.keys_off + hdr.keys_len
        buf = self.store.read_range(pid, start, end - start, kind)
        i, hi = idx.entry_range(g, hdr.count)
        for k, flags, vlen, seq, voff in iter_records(buf, start, hi - i, base=start):
            if k == key:
                if flags & 1:
                    return i, (None, seq, ENTRY_OVERHEAD + len(k))
                if not want_value:
                    return i, (b"", seq, ENTRY_OVERHEAD + len(k) + vlen)
                v = self.store.read_range(pid, hdr.vals_off + voff, vlen, kind) if vlen else b""
                return i, (v, seq, ENTRY_OVERHEAD + len(k) + vlen)
            if k > key:
                return None
            i += 1
        return None

    def leaf_lookup(self, stub: PageStub, key: bytes, want_value: bool = True):
        if stub.filter_id:
            if not self.filter(stub.filter_id).contains(key):
                self.stats.add("filter_negative_hits")
                return None
        hit = self.probe(stub.page_id, key, "leaf", want_value)
        return hit[1] if hit is not None else None

    def segment_lookup(self, pid: int, key: bytes, want_value: bool = True):
        return self.probe(pid, key, "segment", want_value)

    def page_kind(self, pid: int) -> str:
        kind = self.store.kinds.get(pid)
        if kind is not None:
            return kind
        head = self.store.read_shard(ShardKey(pid, 0, min(self.shard, self.store.used[pid])),
                                     PRIORITY_NODE, "node").data
        if head[:4] == NODE_MAGIC:
            return "node"
        return "data"


@dataclass
class WriteRecord:
    """One page written by an externalization (kept only when tracing)."""

    kind: str
    page_id: int
    keys: list
    level: int | None = None


class Checkpointer:
    """The pending checkpoint plus the machinery that makes it durable."""

    def __init__(self, config: Config, store: PageStore, manifest: Manifest,
                 stats: StatsCounters, durable: RootInfo, chi: int | None = None):
        self.config = config
        self.store = store
        self.manifest = manifest
        self.stats = stats
        self.reader = PageReader(store, config, stats)
        self.tree = TurtleTree(config, self.reader, stats)
        self.durable = durable
        if durable.kind != ROOT_EMPTY:
            self.tree.root = PageStub(durable.kind, durable.page_id, durable.filter_id or None)
        self.tree.height = durable.height
        self.chi = config.chi if chi is None else chi
        if self.chi < 1:
            raise InvalidParameter("chi must be >= 1")
        self.batches_applied = 0
        self.seq_upper_bound = durable.seq_upper_bound
        self.trace: list[WriteRecord] | None = None
        self.crash_hook: Callable[[str], None] | None = None
        self.on_commit: list[Callable[[RootInfo], None]] = []

    # -- window

    def apply_batch(self, batch: Run, seq_hi: int | None = None) -> bool:
        """Apply a batch; returns True if it completed a window and was externalized."""
        if batch:
            self.tree.batch_update(batch)
        self.batches_applied += 1
        hi = seq_hi if seq_hi is not None else (batch.max_seq if batch else 0)
        self.seq_upper_bound = max(self.seq_upper_bound, hi)
        if self.batches_applied >= self.chi:
            self.externalize()
            return True
        return False

    def set_checkpoint_distance(self, new_chi: int) -> int:
        if not isinstance(new_chi, int) or new_chi < 1:
            raise InvalidParameter("checkpoint distance must be an integer >= 1")
        if self.batches_applied and self.batches_applied >= new_chi:
            self.externalize()
        self.chi = new_chi
        return self.chi

    @property
    def dirty(self) -> bool:
        return self.batches_applied > 0 or self.seq_upper_bound > self.durable.seq_upper_bound

    # -- externalization

    def externalize(self, force: bool = False) -> RootInfo:
        if not self.dirty and not force:
            return self.durable
        created: list[tuple[object, int]] = []  # (owner, page id) for rollback
        refs: dict[int, int] = defaultdict(int)
        try:
            root = self.tree.root
            info = RootInfo(self.durable.generation + 1, ROOT_EMPTY, 0, 0,
                            self.seq_upper_bound, self.tree.height)
            if isinstance(root, PageStub):
                info.kind, info.page_id, info.filter_id = root.kind, root.page_id, root.filter_id or 0
            elif isinstance(root, LeafPage):
                self._write_leaf(root, created)
                info.kind, info.page_id, info.filter_id = LEAF, root.page_id, root.filter_id or 0
            elif isinstance(root, NodePage):
                self._write_node(root, created, refs, 0)
                info.kind, info.page_id = NODE, root.page_id
            self.store.sync()
        except Exception:
            self._rollback(created)
            raise
        old = self.durable
        if (info.kind, info.page_id) != (old.kind, old.page_id):
            for pid in (info.page_id, info.filter_id):
                if pid:
                    refs[pid] += 1
            for pid in (old.page_id, old.filter_id):
                if pid:
                    refs[pid] -= 1
        new_ids = {pid for _, pid in created}
        for pid in new_ids:
            refs[pid] -= 1  # the allocation reference taken by write_page
        deltas = self._cascade_frees(refs)
        records = []
        for pid, d in deltas.items():
            if pid in new_ids:
                count = 1 + d
                if count:
                    records.append((pid, count, self.store.used[pid]))
            elif d:
                records.append((pid, d, 0))
        try:
            self.manifest.prepare(info, records)
            self.manifest.commit(info.generation)
        except Exception:
            self._rollback(created)
            raise
        for pid, d in deltas.items():
            if d:
                self.store.apply_delta(pid, d)
        self.durable = info
        self.batches_applied = 0
        self.stats.add("checkpoints")
        self._unload()
        self.manifest.maybe_compact(info, self.store.refcounts, self.store.used)
        for cb in self.on_commit:
            cb(info)
        return info

    def _hook(self, phase: str) -> None:
        if self.crash_hook is not None:
            self.crash_hook(phase)

    def _rollback(self, created) -> None:
        for owner, pid in created:
            if isinstance(owner, SegmentPage):
                if owner.page_id == pid:
                    owner.page_id = None
            elif isinstance(owner, LeafPage):
                if owner.page_id == pid:
                    owner.page_id = None
                if owner.filter_id == pid:
                    owner.filter_id = None
            elif isinstance(owner, NodePage) and owner.page_id == pid:
                owner.page_id = None
            if self.store.is_live(pid):
                self.store.apply_delta(pid, -self.store.refcounts[pid])

    def _write_data(self, run: Run, kind: int, name: str) -> int:
        data, idx = encode_data_page(run, kind, self.config.leaf_page_bytes, self.config.shard_bytes)
        pid = self.store.write_page(self.config.leaf_page_bytes, data, name)
        self._hook("page")
        return pid, idx

    def _write_leaf(self, leaf: LeafPage, created) -> None:
        if leaf.page_id is not None:
            return
        pid, idx = self._write_data(leaf.run, KIND_LEAF, "leaf")
        leaf.page_id, leaf.sparse_index = pid, idx
        created.append((leaf, pid))
        if self.config.leaf_filters:
            f = BloomFilter.build(leaf.run.keys, self.config.filter_bits)
            fid = self.store.write_page(self.config.filter_page_bytes, f.encode(), "filter")
            self._hook("page")
            leaf.filter, leaf.filter_id = f, fid
            created.append((leaf, fid))
        if self.trace is not None:
            self.trace.append(WriteRecord("leaf", pid, list(leaf.run.keys)))

    def _write_node(self, node: NodePage, created, refs, depth: int) -> bool:
        """Write dirty descendants then the node itself; True if the node was written."""
        child_changed = False
        for c in node.children:
            if isinstance(c, LeafPage) and c.page_id is None:
                self._write_leaf(c, created)
                child_changed = True
            elif isinstance(c, NodePage):
                child_changed |= self._write_node(c, created, refs, depth + 1)
        for level_no, level in enumerate(node.levels):
            for seg in level:
                page = seg.page
                if page.page_id is None:
                    pid, _ = self._write_data(page.run, KIND_SEGMENT, "segment")
                    page.page_id = pid
                    created.append((page, pid))
                    child_changed = True
                    if self.trace is not None:
                        self.trace.append(WriteRecord("segment", pid, list(page.run.keys), level_no))
        if node.page_id is not None and not child_changed:
            return False
        rec = NodeRecord(
            list(node.pivots),
            node.upper,
            [self._child_ref(c) for c in node.children],
            list(node.pending),
            [[(s.page.page_id, s.active, s.flushed) for s in level] for level in node.levels],
        )
        pid = self.store.write_page(self.config.node_page_bytes,
                                    encode_node(rec, self.config.node_page_bytes), "node")
        self._hook("page")
        node.page_id = pid
        created.append((node, pid))
        for r in rec.references():
            refs[r] += 1
        if self.trace is not None:
            self.trace.append(WriteRecord("node", pid, list(node.pivots)))
        return True

    @staticmethod
    def _child_ref(c) -> tuple[int, int, int]:
        if isinstance(c, PageStub):
            return c.kind, c.page_id, c.filter_id or 0
        if isinstance(c, LeafPage):
            return LEAF, c.page_id, c.filter_id or 0
        return NODE, c.page_id, 0

    def _cascade_frees(self, refs: dict[int, int]) -> dict[int, int]:
        """Extend deltas with decrements from pages that will be freed."""
        counts = self.store.refcounts
        deltas = dict(refs)
        queue = [pid for pid, d in deltas.items() if d and counts.get(pid, 0) + d == 0]
        while queue:
            pid = queue.pop()
            if self.reader.page_kind(pid) != "node":
                continue
            for r in self.reader.node_record(pid).references():
                deltas[r] = deltas.get(r, 0) - 1
                if counts.get(r, 0) + deltas[r] == 0:
                    queue.append(r)
        return deltas

    def _unload(self) -> None:
        """Replace durable leaves with stubs and drop durable segment runs.

        Interior nodes stay resident; their contents are small.
        """
        root = self.tree.root
        if not isinstance(root, NodePage):
            return
        stack = [root]
        while stack:
            node = stack.pop()
            for i, c in enumerate(node.children):
                if isinstance(c, LeafPage) and c.page_id is not None:
                    node.children[i] = PageStub(LEAF, c.page_id, c.filter_id)
                elif isinstance(c, NodePage):
                    stack.append(c)
            for seg in node.segments():
                if seg.page.page_id is not None:
                    seg.page.run = None

    # -- accounting

    def resident_bytes(self) -> int:
        """Approximate bytes held by the pending tree outside the page cache."""
        total = 0
        root = self.tree.root
        if isinstance(root, LeafPage):
            return root.run.nbytes
        if not isinstance(root, NodePage):
            return 0
        stack = [root]
        seen = set()
        while stack:
            node = stack.pop()
            total += 64 + sum(len(p) + 32 for p in node.pivots)
            for c in node.children:
                if isinstance(c, LeafPage):
                    total += c.run.nbytes
                elif isinstance(c, NodePage):
                    stack.append(c)
            for seg in node.segments():
                if seg.page.run is not None and id(seg.page) not in seen:
                    seen.add(id(seg.page))
                    total += seg.page.run.nbytes
        return total
