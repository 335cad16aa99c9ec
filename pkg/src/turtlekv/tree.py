"""In-memory TurtleTree: a B-epsilon-plus tree whose per-node update buffer
is a small, fixed-capacity, level-tiered LSM with fanout 2.

Node buffers reference immutable segment pages.  Flushing never rewrites a
segment; it advances a per-pivot "flushed upper bound" kept in the node, so
the only thing that changes is node metadata.

Children and segments may be resident objects or lazy references to durable
pages; lazy references are resolved through ``reader`` (see
``checkpoint.PageReader``).  Every mutation of a node clears its ``page_id``
which is how the checkpoint layer finds dirty pages.
"""

from __future__ import annotations

import heapq
import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from itertools import chain
from typing import Iterator, Union

from .errors import BufferFull, ContractViolation
from .model import Config, Run, StatsCounters, merge_runs

LEAF = 1
NODE = 2


class SegmentPage:
    """Immutable sorted run stored as one leaf-sized page.

    ``run`` is ``None`` while the page is not resident; the reader loads it.
    """

    __slots__ = ("run", "page_id")

    def __init__(self, run: Run | None, page_id: int | None = None):
        self.run = run
        self.page_id = page_id

    def __repr__(self):
        state = f"{len(self.run)} entries" if self.run is not None else "unloaded"
        return f"SegmentPage({state}, page_id={self.page_id})"


class Segment:
    """A node's view of one segment page.

    ``active`` is a bit set over pivot indices addressed by at least one
    non-flushed entry.  ``flushed`` maps a pivot index to the index of the
    first non-flushed entry inside that pivot's key range; pivots absent from
    the map have nothing flushed.
    """

    __slots__ = ("page", "active", "flushed")

    def __init__(self, page: SegmentPage, active: int = 0, flushed: dict | None = None):
        self.page = page
        self.active = active
        self.flushed = flushed if flushed is not None else {}

    @property
    def active_pivots(self) -> list[int]:
        bits, out, i = self.active, [], 0
        while bits:
            if bits & 1:
                out.append(i)
            bits >>= 1
            i += 1
        return out

    @property
    def flushed_upper_bounds(self) -> dict:
        return self.flushed

    def copy(self) -> "Segment":
        return Segment(self.page, self.active, dict(self.flushed))

    def __repr__(self):
        return f"Segment(active={bin(self.active)}, flushed={self.flushed}, {self.page!r})"


class LeafPage:
    __slots__ = ("run", "page_id", "filter_id", "filter", "sparse_index")

    def __init__(self, run: Run, page_id=None, filter_id=None, filter=None, sparse_index=None):
        self.run = run
        self.page_id = page_id
        self.filter_id = filter_id
        self.filter = filter
        self.sparse_index = sparse_index

    @property
    def pairs(self) -> list:
        return self.run.pairs()

    @property
    def nbytes(self) -> int:
        return self.run.nbytes

    def __repr__(self):
        return f"LeafPage({len(self.run)} pairs, page_id={self.page_id})"


@dataclass
class PageStub:
    """Reference to a durable child page that is not resident."""

    kind: int
    page_id: int
    filter_id: int | None = None


class NodePage:
    """Interior node.

    ``pivots[i]`` is the inclusive lower bound of child ``i``'s key range;
    ``pivots[0]`` is the lower bound of the node itself and ``upper`` its
    exclusive upper bound (``None`` when unbounded).  Both matter because a
    segment page shared after a split may hold keys outside the node's range.
    ``levels[i]`` is an (ascending, key-disjoint) list of segments, empty when
    vacant.
    """

    __slots__ = ("pivots", "children", "levels", "pending", "page_id", "upper")

    def __init__(self, pivots, children, nlevels, levels=None, pending=None, page_id=None,
                 upper=None):
        self.upper = upper
        self.pivots = pivots
        self.children = children
        self.levels = levels if levels is not None else [[] for _ in range(nlevels)]
        self.pending = pending if pending is not None else [0] * len(pivots)
        self.page_id = page_id

    def touch(self) -> None:
        self.page_id = None

    @property
    def buffer(self) -> list:
        return self.levels

    @property
    def pending_bytes(self) -> list[int]:
        return self.pending

    @property
    def buffered_bytes(self) -> int:
        return sum(self.pending)

    def segments(self) -> Iterator[Segment]:
        for level in self.levels:
            yield from level

    @property
    def segment_count(self) -> int:
        return sum(len(level) for level in self.levels)

    def level_state(self, i: int) -> str:
        return "occupied" if self.levels[i] else "vacant"

    def __repr__(self):
        shape = [len(level) for level in self.levels]
        return f"NodePage({len(self.pivots)} pivots, levels={shape}, page_id={self.page_id})"


Child = Union[LeafPage, NodePage, PageStub]

FOUND, DELETED, ABSENT = "found", "deleted", "absent"


@dataclass(frozen=True)
class Lookup:
    status: str
    value: bytes | None = None

    @property
    def found(self) -> bool:
        return self.status == FOUND


def _pivot_bounds(keys: list[bytes], pivots: list[bytes], upper: bytes | None) -> list[int]:
    """Entry index where each pivot's range starts, plus the end of the last range."""
    end = len(keys) if upper is None else bisect_left(keys, upper)
    return [*(bisect_left(keys, p) for p in pivots), end]


class TurtleTree:
    """Mutable TurtleTree plus the operations on it.

    The tree is owned by a single mutator.  ``root`` is ``None`` for an empty
    tree, a ``LeafPage`` for a single-leaf tree, or a ``NodePage``.
    """

    def __init__(self, config: Config, reader=None, stats: StatsCounters | None = None):
        self.config = config
        self.reader = reader
        self.stats = stats if stats is not None else StatsCounters()
        self.L = config.leaf_capacity
        self.rho = config.pivot_capacity
        self.caps = config.level_caps
        self.nlevels = len(self.caps)
        self.min_pivots = math.ceil(self.rho / 2)
        self.root: Child | None = None
        self.height = 0
        self.flush_count = 0

    # ------------------------------------------------------------------ loading

    def segment_run(self, page: SegmentPage) -> Run:
        if page.run is not None:
            return page.run
        return self.reader.load_segment(page.page_id)

    def child(self, node: NodePage, i: int) -> LeafPage | NodePage:
        c = node.children[i]
        if isinstance(c, PageStub):
            c = self.reader.load_child(c)
            node.children[i] = c  # swizzle only; contents unchanged, node stays clean
        return c

    def root_object(self) -> LeafPage | NodePage | None:
        if isinstance(self.root, PageStub):
            self.root = self.reader.load_child(self.root)
        return self.root

    def new_node(self, pivots, children) -> NodePage:
        return NodePage(list(pivots), list(children), self.nlevels)

    # ------------------------------------------------------------ segment meta

    def _seg_contrib(self, node: NodePage, seg: Segment, run: Run | None = None):
        """Yield (pivot, active bytes) for every active pivot of ``seg``."""
        if not seg.active:
            return
        run = run if run is not None else self.segment_run(seg.page)
        bounds = _pivot_bounds(run.keys, node.pivots, node.upper)
        cum = run.cum
        for p in seg.active_pivots:
            a = max(bounds[p], seg.flushed.get(p, 0))
            b = bounds[p + 1]
            if a < b:
                yield p, cum[b] - cum[a]

    def _new_segment(self, node: NodePage, run: Run) -> Segment:
        bounds = _pivot_bounds(run.keys, node.pivots, node.upper)
        active = 0
        for p in range(len(node.pivots)):
            if bounds[p] < bounds[p + 1]:
                active |= 1 << p
        return Segment(SegmentPage(run), active, {})

    def _active_slices(self, node: NodePage, seg: Segment, run: Run, start_key=None):
        bounds = _pivot_bounds(run.keys, node.pivots, node.upper)
        out = []
        for p in seg.active_pivots:
            a = max(bounds[p], seg.flushed.get(p, 0))
            if start_key is not None:
                a = max(a, bisect_left(run.keys, start_key))
            b = bounds[p + 1]
            if a < b:
                out.append((a, b))
        return out

    def _active_run(self, node: NodePage, seg: Segment) -> Run:
        run = self.segment_run(seg.page)
        slices = self._active_slices(node, seg, run)
        if len(slices) == 1 and slices[0] == (0, len(run)):
            return run
        keys, cells = [], []
        for a, b in slices:
            keys.extend(run.keys[a:b])
            cells.extend(run.cells[a:b])
        return Run(keys, cells)

    def _level_run(self, node: NodePage, i: int) -> Run:
        level = node.levels[i]
        if len(level) == 1:
            return self._active_run(node, level[0])
        keys, cells = [], []
        for seg in level:
            r = self._active_run(node, seg)
            keys.extend(r.keys)
            cells.extend(r.cells)
        return Run(keys, cells)

    def _split_segments(self, run: Run, cap: int) -> list[Run]:
        L = self.L
        parts = min(cap, max(1, math.ceil(run.nbytes / L)))
        while True:
            pieces = run.split_by_bytes(parts)
            if parts >= cap or all(p.nbytes <= L for p in pieces):
                return pieces
            parts += 1

    # ---------------------------------------------------------------- buffers

    def buffer_insert(self, node: NodePage, batch: Run) -> NodePage:
        """Insert ``batch`` into the node's buffer.

        Merges cascade through occupied levels until a vacant level absorbs
        the result.  When every level is occupied the merged run is placed
        in the last level if it fits there; otherwise ``BufferFull`` is
        raised and nothing is modified.
        """
        if batch:
            self._cascade(node, batch, 0)
        return node

    def _cascade(self, node: NodePage, run: Run, start: int) -> None:
        n = self.nlevels
        j = next((i for i in range(start, n) if not node.levels[i]), None)
        merge_upto = n if j is None else j  # exclusive
        j = n - 1 if j is None else j
        runs = [run, *(self._level_run(node, i) for i in range(start, merge_upto))]
        merged = merge_runs(runs, check=False) if len(runs) > 1 else run
        if j == n - 1 and merged.nbytes > self.caps[j] * self.L:
            raise BufferFull(f"{merged.nbytes} bytes do not fit the last buffer level")
        for i in range(start, merge_upto):
            for seg in node.levels[i]:
                for p, b in self._seg_contrib(node, seg):
                    node.pending[p] -= b
            node.levels[i] = []
        segs = [self._new_segment(node, part) for part in self._split_segments(merged, self.caps[j])]
        for seg in segs:
            for p, b in self._seg_contrib(node, seg, seg.page.run):
                node.pending[p] += b
        node.levels[j] = segs
        node.touch()

    def select_flush_pivot(self, node: NodePage) -> int | None:
        """Pivot with the most pending bytes if that is at least L; lowest index on ties."""
        if not node.pending:
            return None
        top = max(node.pending)
        if top < self.L:
            return None
        return node.pending.index(top)

    def extract_flush_batch(self, node: NodePage, pivot: int, limit: int | None = None) -> Run:
        """Remove up to ``limit`` (default L) merged bytes addressed to ``pivot``.

        Segment pages are left untouched; only the node's flushed upper
        bounds, active bits and pending counts move.  The node is modified in
        place and the extracted batch is returned.
        """
        if not 0 <= pivot < len(node.pivots):
            raise ContractViolation(f"pivot {pivot} out of range")
        limit = self.L if limit is None else limit
        lo_key = node.pivots[pivot]
        hi_key = node.pivots[pivot + 1] if pivot + 1 < len(node.pivots) else node.upper
        sources = []
        level_runs, ranks = [], []
        for i, level in enumerate(node.levels):
            keys, cells = [], []
            for seg in level:
                if not (seg.active >> pivot) & 1:
                    continue
                run = self.segment_run(seg.page)
                lo = bisect_left(run.keys, lo_key)
                hi = bisect_left(run.keys, hi_key) if hi_key is not None else len(run)
                a = max(lo, seg.flushed.get(pivot, 0))
                if a < hi:
                    sources.append((seg, run, lo, a, hi))
                    keys.extend(run.keys[a:hi])
                    cells.extend(run.cells[a:hi])
            if keys:
                level_runs.append(Run(keys, cells))
                ranks.append(i)
        merged = merge_runs(level_runs, ranks=ranks, check=False)
        cum = merged.cum
        cut = max(1, bisect_right(cum, limit) - 1)
        if cut < len(merged):
            boundary = merged.keys[cut]
            out = merged.slice(0, cut)
        else:
            boundary = None
            out = merged
        removed = 0
        for seg, run, lo, a, hi in sources:
            b = bisect_left(run.keys, boundary, a, hi) if boundary is not None else hi
            removed += run.bytes_between(a, b)
            if b >= hi:
                seg.active &= ~(1 << pivot)
                seg.flushed.pop(pivot, None)
            elif b > lo:
                seg.flushed[pivot] = b
        node.pending[pivot] -= removed
        for i, level in enumerate(node.levels):
            if any(not s.active for s in level):
                node.levels[i] = [s for s in level if s.active]
        node.touch()
        return out

    # ----------------------------------------------------------------- leaves

    def leaf_merge(self, leaf: LeafPage | None, batch: Run) -> list[LeafPage]:
        """Merge a batch into a leaf; tombstones annihilate and are dropped."""
        base = leaf.run if leaf is not None else Run()
        merged = merge_runs([batch, base], drop_tombstones=True, check=False)
        if leaf is not None and len(merged) == len(base) and all(
            a is b for a, b in zip(merged.cells, base.cells)
        ):
            return [leaf]
        if not merged:
            return []
        parts = self._split_segments(merged, len(merged))
        return [LeafPage(p) for p in parts]

    # -------------------------------------------------------------- pivot maps

    def _replace_pivot(self, node: NodePage, p: int, new_children: list, new_keys: list[bytes]):
        """Replace child ``p`` by ``new_children`` whose lower bounds are ``new_keys``."""
        m = len(new_children)
        assert m >= 1 and len(new_keys) == m
        new_keys = [node.pivots[p], *new_keys[1:]]
        shift = m - 1
        old_pending = node.pending[p]
        node.pivots[p:p + 1] = new_keys
        node.children[p:p + 1] = new_children
        node.pending[p:p + 1] = [0] * m
        for seg in node.segments():
            bit = (seg.active >> p) & 1
            low = seg.active & ((1 << p) - 1)
            high = seg.active >> (p + 1)
            fub = seg.flushed.pop(p, None)
            if shift:
                seg.flushed = {(q + shift if q > p else q): v for q, v in seg.flushed.items()}
            seg.active = low | (high << (p + m))
            if not bit:
                continue
            run = self.segment_run(seg.page)
            bounds = _pivot_bounds(run.keys, node.pivots, node.upper)
            cum = run.cum
            for j in range(p, p + m):
                a, b = bounds[j], bounds[j + 1]
                if fub is not None and fub > a:
                    a = min(fub, b)
                    if a < b:
                        seg.flushed[j] = a
                if a < b:
                    seg.active |= 1 << j
                    node.pending[j] += cum[b] - cum[a]
        assert sum(node.pending[p:p + m]) == old_pending
        node.touch()

    def _merge_pivots(self, node: NodePage, a: int, child) -> None:
        """Merge pivots ``a`` and ``a + 1`` into one pivot pointing at ``child``.

        A prefix bound can express the merged flush state unless live entries
        of pivot ``a`` would sit below flushed entries of pivot ``a + 1``; such
        segments are copied to a fresh page holding only their live entries.
        """
        b = a + 1
        for level_no, level in enumerate(node.levels):
            for k, seg in enumerate(level):
                ba = (seg.active >> a) & 1
                bb = (seg.active >> b) & 1
                if not (ba or bb):
                    seg.active = _drop_bit(seg.active, b)
                    seg.flushed.pop(a, None)
                    seg.flushed.pop(b, None)
                    seg.flushed = {(q - 1 if q > b else q): v for q, v in seg.flushed.items()}
                    continue
                run = self.segment_run(seg.page)
                bounds = _pivot_bounds(run.keys, node.pivots, node.upper)
                lo_a, lo_b, hi_b = bounds[a], bounds[b], bounds[b + 1]
                # a cleared bit means every entry of that pivot is flushed
                xa = max(lo_a, seg.flushed.get(a, 0)) if ba else lo_b
                xb = max(lo_b, seg.flushed.get(b, 0)) if bb else hi_b
                a_live = xa < lo_b
                if a_live and xb > lo_b:
                    seg = level[k] = self._rewrite_segment(node, seg)
                    x = lo_a
                else:
                    x = xa if a_live else xb
                live = a_live or xb < hi_b
                seg.flushed.pop(a, None)
                seg.flushed.pop(b, None)
                if live and x > lo_a:
                    seg.flushed[a] = x
                seg.active = _drop_bit(seg.active & ~(1 << a), b) | ((1 << a) if live else 0)
                seg.flushed = {(q - 1 if q > b else q): v for q, v in seg.flushed.items()}
            node.levels[level_no] = [s for s in level if s.active]
        node.pending[a:b + 1] = [node.pending[a] + node.pending[b]]
        del node.pivots[b]
        node.children[a:b + 1] = [child]
        node.touch()

    def _rewrite_segment(self, node: NodePage, seg: Segment) -> Segment:
        """Copy a segment's active entries into a fresh page with no flush state."""
        run = self._active_run(node, seg)
        return self._new_segment(node, run)

    # ------------------------------------------------------------------ nodes

    def _byte_limit(self, node: NodePage) -> int:
        return self.L * (max(2, min(len(node.pivots), self.rho)) - 1)

    def _flush(self, node: NodePage, p: int, limit: int | None = None) -> None:
        batch = self.extract_flush_batch(node, p, limit)
        self.flush_count += 1
        if not batch:
            return
        child = self.child(node, p)
        if isinstance(child, LeafPage):
            leaves = self.leaf_merge(child, batch)
            if len(leaves) == 1 and leaves[0] is child:
                return
            if not leaves:
                if len(node.pivots) > 1:
                    self._remove_pivot(node, p)
                    return
                leaves = [LeafPage(Run())]
            self._replace_pivot(node, p, leaves, [lf.run.keys[0] if lf.run else node.pivots[p] for lf in leaves])
            self._fix_small_leaves(node, p, len(leaves))
        else:
            parts = self._update_node(child, batch)
            if len(parts) > 1:
                self._replace_pivot(node, p, parts, [n.pivots[0] for n in parts])
            else:
                node.children[p] = parts[0]
                node.touch()
            self._fix_underflows(node)

    def _fix_underflows(self, node: NodePage) -> None:
        q = 0
        while q < len(node.children) and len(node.pivots) > 1:
            c = node.children[q]
            if isinstance(c, NodePage) and len(c.pivots) < self.min_pivots:
                self._fix_underflow(node, q)
                q = max(0, q - 1)
                continue
            q += 1

    def _remove_pivot(self, node: NodePage, p: int) -> None:
        if p > 0:
            self._merge_pivots(node, p - 1, node.children[p - 1])
        else:
            self._merge_pivots(node, 0, node.children[1])

    def _fix_small_leaves(self, node: NodePage, p: int, m: int) -> None:
        small = self.L // 4
        q = p
        while q < min(p + m, len(node.pivots)):
            leaf = node.children[q]
            if isinstance(leaf, LeafPage) and leaf.run.nbytes < small and len(node.pivots) > 1:
                nb = q + 1 if q + 1 < len(node.pivots) else q - 1
                other = self.child(node, nb)
                if other.run.nbytes + leaf.run.nbytes <= self.L:
                    a = min(q, nb)
                    left, right = (leaf, other) if q < nb else (other, leaf)
                    joined = LeafPage(Run(left.run.keys + right.run.keys, left.run.cells + right.run.cells))
                    self._merge_pivots(node, a, joined)
                    m -= 1
                    continue
            q += 1

    def _fix_underflow(self, node: NodePage, q: int) -> None:
        if len(node.pivots) < 2:
            return
        nb = q + 1 if q + 1 < len(node.pivots) else q - 1
        a = min(q, nb)
        left, right = self.child(node, a), self.child(node, a + 1)
        joined = self.join_nodes(left, right, check_capacity=False)
        parts = [joined]
        if len(joined.pivots) > self.rho:
            parts = self._split_all(joined)
        self._merge_pivots(node, a, parts[0])
        if len(parts) > 1:
            self._replace_pivot(node, a, parts, [n.pivots[0] for n in parts])

    def _insert_with_room(self, node: NodePage, chunk: Run) -> None:
        while True:
            try:
                self.buffer_insert(node, chunk)
                return
            except BufferFull:
                self._flush(node, self._heaviest(node))

    def _restore(self, node: NodePage, flushed_once: bool = True) -> None:
        while True:
            p = self.select_flush_pivot(node)
            if p is not None and not flushed_once:
                self._flush(node, p)
                flushed_once = True
                continue
            if sum(node.pending) > self._byte_limit(node):
                if p is None:
                    p = self._heaviest(node)
                self._flush(node, p)
                continue
            return

    def _update_node(self, node: NodePage, batch: Run) -> list[NodePage]:
        for chunk in self._chunks(batch):
            self._insert_with_room(node, chunk)
            self._restore(node, flushed_once=False)
        if len(node.pivots) > self.rho:
            return self._split_all(node)
        return [node]

    def _split_all(self, node: NodePage) -> list[NodePage]:
        if len(node.pivots) <= self.rho:
            return [node]
        left, right, _ = self.split_node(node)
        return self._split_all(left) + self._split_all(right)

    def split_node(self, node: NodePage) -> tuple[NodePage, NodePage, bytes]:
        """Split pivots as evenly as possible; segments may end up shared."""
        n = len(node.pivots)
        if n < 2:
            raise ContractViolation("cannot split a node with fewer than two pivots")
        mid = (n + 1) // 2
        sep = node.pivots[mid]
        left = NodePage(node.pivots[:mid], node.children[:mid], self.nlevels,
                        pending=node.pending[:mid], upper=sep)
        right = NodePage(node.pivots[mid:], node.children[mid:], self.nlevels,
                         pending=node.pending[mid:], upper=node.upper)
        lmask = (1 << mid) - 1
        for i, level in enumerate(node.levels):
            for seg in level:
                la = seg.active & lmask
                ra = seg.active >> mid
                if la:
                    left.levels[i].append(
                        Segment(seg.page, la, {q: v for q, v in seg.flushed.items() if q < mid})
                    )
                if ra:
                    right.levels[i].append(
                        Segment(seg.page, ra, {q - mid: v for q, v in seg.flushed.items() if q >= mid})
                    )
        for half in (left, right):
            self._restore(half)
        return left, right, sep

    def join_nodes(self, left: NodePage, right: NodePage, check_capacity: bool = True) -> NodePage:
        """Concatenate two sibling nodes (left's key range below right's)."""
        if left.pivots and right.pivots and left.pivots[-1] >= right.pivots[0]:
            raise ContractViolation("join_nodes needs adjacent, non-overlapping siblings")
        if check_capacity and len(left.pivots) + len(right.pivots) > self.rho:
            raise ContractViolation("joined node would exceed pivot capacity")
        shift = len(left.pivots)
        joined = NodePage(
            left.pivots + right.pivots,
            left.children + right.children,
            self.nlevels,
            pending=left.pending + right.pending,
            upper=right.upper,
        )
        for i in range(self.nlevels):
            joined.levels[i] = [s.copy() for s in left.levels[i]]
            for s in right.levels[i]:
                joined.levels[i].append(
                    Segment(s.page, s.active << shift, {q + shift: v for q, v in s.flushed.items()})
                )
        self._normalize_levels(joined)
        return joined

    def _normalize_levels(self, node: NodePage) -> None:
        """Push levels holding more segments than their capacity down a level."""
        last = self.nlevels - 1
        for i in range(self.nlevels):
            while len(node.levels[i]) > self.caps[i]:
                run = self._level_run(node, i)
                old = node.levels[i]
                if i < last:
                    try:
                        self._cascade(node, run, i + 1)
                    except BufferFull:
                        self._flush(node, self._heaviest(node))
                        continue
                    new_segs = []
                elif run.nbytes <= self.caps[i] * self.L:
                    new_segs = [self._new_segment(node, part)
                                for part in self._split_segments(run, self.caps[i])]
                else:
                    self._flush(node, self._heaviest(node))
                    continue
                for seg in old:
                    for p, nb in self._seg_contrib(node, seg):
                        node.pending[p] -= nb
                for seg in new_segs:
                    for p, nb in self._seg_contrib(node, seg, seg.page.run):
                        node.pending[p] += nb
                node.levels[i] = new_segs
        node.touch()

    @staticmethod
    def _heaviest(node: NodePage) -> int:
        return max(range(len(node.pending)), key=node.pending.__getitem__)

    def _chunks(self, batch: Run) -> list[Run]:
        if batch.nbytes <= self.L:
            return [batch]
        parts = math.ceil(batch.nbytes / self.L)
        while True:
            pieces = batch.split_by_bytes(parts)
            if all(p.nbytes <= self.L for p in pieces) or parts >= len(batch):
                return pieces
            parts += 1

    # ------------------------------------------------------------------- tree

    def batch_update(self, batch: Run) -> None:
        """Apply a sorted, de-duplicated batch to the tree."""
        if not batch:
            return
        for chunk in self._chunks(batch):
            self._apply_chunk(chunk)

    def _apply_chunk(self, chunk: Run) -> None:
        root = self.root_object()
        if root is None or isinstance(root, LeafPage):
            leaves = self.leaf_merge(root, chunk)
            if not leaves:
                self.root, self.height = None, 0
            elif len(leaves) == 1:
                self.root, self.height = leaves[0], 1
            else:
                self.root = self.new_node([b"", *(lf.run.keys[0] for lf in leaves[1:])], leaves)
                self.height = 2
            return
        parts = self._update_node(root, chunk)
        while len(parts) > 1:
            top = self.new_node([b"", *(n.pivots[0] for n in parts[1:])], parts)
            self.height += 1
            parts = self._split_all(top)
        self.root = parts[0]
        self._collapse_root()

    def _collapse_root(self) -> None:
        while isinstance(self.root, NodePage) and len(self.root.pivots) == 1:
            node = self.root
            while node.pending[0] > 0:
                self._flush(node, 0)
                if len(node.pivots) > 1:
                    return
            child = self.child(node, 0)
            self.root = child
            self.height -= 1
            if isinstance(child, NodePage):
                child.pivots[0], child.upper = b"", None
                child.touch()
            elif not child.run:
                self.root, self.height = None, 0

    # ---------------------------------------------------------------- queries

    def point_query(self, key: bytes, want_value: bool = True) -> Lookup:
        """Newest state of ``key``; with ``want_value`` False, durable values are not read."""
        node = self.root_object()
        while isinstance(node, NodePage):
            p = bisect_right(node.pivots, key) - 1
            if p < 0:
                p = 0
            for level in node.levels:
                for seg in level:
                    if not (seg.active >> p) & 1:
                        continue
                    hit = self._segment_probe(seg, key, want_value)
                    if hit is None:
                        continue
                    idx, cell = hit
                    fub = seg.flushed.get(p)
                    if fub is not None and idx < fub:
                        continue
                    if cell[0] is None:
                        return Lookup(DELETED)
                    return Lookup(FOUND, cell[0])
            c = node.children[p]
            if isinstance(c, PageStub) and c.kind == LEAF:
                cell = self.reader.leaf_lookup(c, key, want_value)
                return Lookup(FOUND, cell[0]) if cell is not None else Lookup(ABSENT)
            node = self.child(node, p)
        if node is None:
            return Lookup(ABSENT)
        if node.filter is not None and not node.filter.contains(key):
            self.stats.add("filter_negative_hits")
            return Lookup(ABSENT)
        cell = node.run.lookup(key)
        return Lookup(FOUND, cell[0]) if cell is not None else Lookup(ABSENT)

    def _segment_probe(self, seg: Segment, key: bytes, want_value: bool = True):
        run = seg.page.run
        if run is None:
            return self.reader.segment_lookup(seg.page.page_id, key, want_value)
        keys = run.keys
        i = bisect_left(keys, key)
        if i < len(keys) and keys[i] == key:
            return i, run.cells[i]
        return None

    def get(self, key: bytes) -> bytes | None:
        r = self.point_query(key)
        return r.value if r.found else None

    def iter_from(self, start: bytes = b"") -> Iterator[tuple[bytes, bytes]]:
        """Live (key, value) pairs with key >= start, ascending."""
        root = self.root_object()
        if root is None:
            return iter(())
        return ((k, c[0]) for k, c in self._iter_child(root, start) if c[0] is not None)

    def range_scan(self, start: bytes, limit: int) -> list[tuple[bytes, bytes]]:
        if limit < 0:
            raise ContractViolation("limit must be >= 0")
        out = []
        if limit == 0:
            return out
        for pair in self.iter_from(start):
            out.append(pair)
            if len(out) >= limit:
                break
        return out

    def _iter_child(self, c, start: bytes):
        if isinstance(c, LeafPage):
            run = c.run
            i = bisect_left(run.keys, start)
            return zip(run.keys[i:], run.cells[i:])
        return self._iter_node(c, start)

    def _iter_node(self, node: NodePage, start: bytes):
        """Min-heap merge of buffer levels (newer) and children (oldest)."""
        sources = []
        for i, level in enumerate(node.levels):
            if level:
                sources.append(self._tag(self._iter_level(node, level, start), i))
        p0 = max(0, bisect_right(node.pivots, start) - 1)
        kids = chain.from_iterable(
            self._iter_child(self.child(node, q), start) for q in range(p0, len(node.pivots))
        )
        sources.append(self._tag(kids, self.nlevels))
        last = None
        for key, _, cell in heapq.merge(*sources):
            if key == last:
                continue
            last = key
            if cell[0] is not None:
                yield key, cell

    @staticmethod
    def _tag(it, rank):
        return ((k, rank, c) for k, c in it)

    def _iter_level(self, node: NodePage, level: list[Segment], start: bytes):
        for seg in level:
            run = self.segment_run(seg.page)
            if run.keys and run.keys[-1] < start:
                continue
            for a, b in self._active_slices(node, seg, run, start):
                yield from zip(run.keys[a:b], run.cells[a:b])

    # ------------------------------------------------------------- inspection

    def walk(self, load: bool = True):
        """Yield (depth, parent, index, child) for every node and leaf."""
        root = self.root_object() if load else self.root
        if root is None:
            return
        stack = [(0, None, 0, root)]
        while stack:
            depth, parent, idx, c = stack.pop()
            yield depth, parent, idx, c
            if isinstance(c, NodePage):
                for i in reversed(range(len(c.children))):
                    ch = self.child(c, i) if load else c.children[i]
                    stack.append((depth + 1, c, i, ch))

    def check_invariants(self) -> None:
        """Raise AssertionError describing the first structural violation."""
        check_tree(self)


def _drop_bit(bits: int, b: int) -> int:
    low = bits & ((1 << b) - 1)
    return low | ((bits >> (b + 1)) << b)


def check_tree(tree: TurtleTree) -> None:
    L, rho = tree.L, tree.rho
    slack = 2 * tree.config.max_entry_bytes
    root = tree.root_object()
    if root is None:
        assert tree.height == 0, "empty tree must have height 0"
        return
    leaf_depths = set()

    def visit(c, depth, lo, hi, is_root):
        if isinstance(c, LeafPage):
            leaf_depths.add(depth)
            keys = c.run.keys
            assert all(a < b for a, b in zip(keys, keys[1:])), "leaf keys not ascending"
            assert not c.run.has_tombstones(), "tombstone in leaf"
            assert c.run.nbytes <= L + slack, f"leaf holds {c.run.nbytes} > L bytes"
            if keys:
                assert lo is None or keys[0] >= lo, "leaf key below its pivot range"
                assert hi is None or keys[-1] < hi, "leaf key above its pivot range"
            return
        node = c
        n = len(node.pivots)
        assert n == len(node.children) == len(node.pending), "pivot/child/pending length mismatch"
        assert all(a < b for a, b in zip(node.pivots, node.pivots[1:])), "pivots not ascending"
        if is_root:
            assert node.upper is None and node.pivots[0] == b"", "root must be unbounded"
            assert n >= 2, "interior root needs at least two pivots"
        else:
            assert tree.min_pivots <= n <= rho, f"non-root node has {n} pivots"
        assert node.segment_count <= rho - 1, f"{node.segment_count} segments > rho-1"
        assert sum(node.pending) <= L * (rho - 1), "buffered bytes exceed L*(rho-1)"
        assert sum(node.pending) <= L * (max(2, n) - 1), "buffered bytes exceed L*(pivots-1)"
        recomputed = [0] * n
        for i, level in enumerate(node.levels):
            assert len(level) <= min(2**i, tree.caps[i]), f"level {i} holds {len(level)} segments"
            prev_last = None
            for seg in level:
                assert seg.active, "inactive segment still referenced"
                run = tree.segment_run(seg.page)
                keys = run.keys
                assert all(a < b for a, b in zip(keys, keys[1:])), "segment keys not ascending"
                assert run.nbytes <= L + slack, "segment larger than L"
                bounds = _pivot_bounds(keys, node.pivots, node.upper)
                active_keys = []
                for p in range(n):
                    a = max(bounds[p], seg.flushed.get(p, 0))
                    b = bounds[p + 1]
                    has = bool((seg.active >> p) & 1)
                    if has:
                        assert a < b, f"active bit {p} set with nothing active"
                    else:
                        assert p not in seg.flushed, f"flushed bound kept for inactive pivot {p}"
                    if p in seg.flushed:
                        assert bounds[p] < seg.flushed[p] < bounds[p + 1], "flushed bound out of range"
                    if has:
                        recomputed[p] += run.cum[b] - run.cum[a]
                        active_keys.append((keys[a], keys[b - 1]))
                assert seg.active >> n == 0, "active bit beyond last pivot"
                if active_keys:
                    first, last = active_keys[0][0], active_keys[-1][1]
                    assert lo is None or first >= lo, "segment entry below node range"
                    assert hi is None or last < hi, "segment entry above node range"
                    assert prev_last is None or first > prev_last, "level segments overlap"
                    prev_last = last
        assert recomputed == node.pending, f"pending {node.pending} != {recomputed}"
        for i in range(n):
            clo = node.pivots[i] if (i > 0 or lo is not None) else None
            if i == 0 and lo is not None:
                clo = lo
            chi = node.pivots[i + 1] if i + 1 < n else hi
            child = tree.child(node, i)
            if isinstance(child, NodePage):
                assert child.pivots[0] == node.pivots[i], "child lower bound differs from pivot"
                assert child.upper == (node.pivots[i + 1] if i + 1 < n else node.upper), \
                    "child upper bound differs from next pivot"
            visit(child, depth + 1, clo, chi, False)

    visit(root, 1, None, None, True)
    assert len(leaf_depths) == 1, f"leaves at unequal depths {leaf_depths}"
    assert leaf_depths == {tree.height}, f"height {tree.height} but leaves at {leaf_depths}"
