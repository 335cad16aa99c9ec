"""Binary page formats.

Data pages (leaves and buffer segments) are laid out so that a point lookup
can be answered from a few aligned shards::

    [header 64B][sparse index][key records ...][values ...]

The sparse index holds every k-th key (k = 16, or 32 when the k = 16 index
would not fit in the first shard next to the header) with the byte offset of
the record group it starts.  Record groups never straddle a shard boundary
and neither do values no larger than a shard, so a lookup reads the index
shard, one key shard and, only when the value is wanted, one value shard.
Records are ``<HBIQI`` (key length, flags, value length, seq, value offset)
followed by the key; their fixed part is exactly ``ENTRY_OVERHEAD`` bytes.
A zero key length marks padding up to the next shard boundary.
"""

from __future__ import annotations

import struct
from bisect import bisect_right
from dataclasses import dataclass

from .errors import ContractViolation, OpenFailure
from .model import ENTRY_OVERHEAD, Run

DATA_MAGIC = b"TKDP"
NODE_MAGIC = b"TKND"
FORMAT_VERSION = 1

KIND_LEAF = 1
KIND_SEGMENT = 2

FLAG_PADDED = 1
FLAG_TOMBSTONE = 1

_DATA_HDR = struct.Struct("<4sBBHIIIIIIIII")  # 44 bytes, padded to 64
DATA_HEADER_BYTES = 64
_REC = struct.Struct("<HBIQI")
_IDX = struct.Struct("<HII")
assert _REC.size == ENTRY_OVERHEAD


@dataclass
class DataHeader:
    kind: int
    flags: int
    stride: int
    count: int
    index_count: int
    index_len: int
    keys_off: int
    keys_len: int
    vals_off: int
    vals_len: int
    total_len: int

    @property
    def index_end(self) -> int:
        return DATA_HEADER_BYTES + self.index_len


@dataclass
class SparseIndex:
    """Every ``stride``-th key of a run with the offset of its record group."""

    stride: int
    keys: list[bytes]
    entry_idx: list[int]
    offsets: list[int]

    def group_for(self, key: bytes) -> int | None:
        """Index of the group that may hold ``key``; ``None`` if key precedes all."""
        g = bisect_right(self.keys, key) - 1
        return g if g >= 0 else None

    def entry_range(self, g: int, count: int) -> tuple[int, int]:
        lo = self.entry_idx[g]
        hi = self.entry_idx[g + 1] if g + 1 < len(self.entry_idx) else count
        return lo, hi

    def search(self, run: Run, key: bytes) -> int | None:
        """Entry index of ``key`` in ``run`` found through the index only."""
        g = self.group_for(key)
        if g is None:
            return None
        lo, hi = self.entry_range(g, len(run))
        for i in range(lo, hi):
            if run.keys[i] == key:
                return i
        return None


def index_bytes(run: Run, stride: int) -> int:
    return sum(_IDX.size + len(run.keys[i]) for i in range(0, len(run), stride))


def choose_stride(run: Run, shard_bytes: int) -> int:
    return 16 if DATA_HEADER_BYTES + index_bytes(run, 16) <= shard_bytes else 32


def _layout(run: Run, stride: int, shard_bytes: int, padded: bool):
    """Compute record-group offsets and value offsets for one page."""
    n = len(run)
    keys, cells = run.keys, run.cells
    idx_len = index_bytes(run, stride)
    keys_off = DATA_HEADER_BYTES + idx_len
    pos = keys_off
    rec_off = [0] * n
    group_off = []
    for g in range(0, n, stride):
        end = min(n, g + stride)
        glen = sum(ENTRY_OVERHEAD + len(keys[i]) for i in range(g, end))
        if padded and glen <= shard_bytes and pos // shard_bytes != (pos + glen - 1) // shard_bytes:
            pos = (pos // shard_bytes + 1) * shard_bytes
        group_off.append(pos)
        for i in range(g, end):
            rec_off[i] = pos
            pos += ENTRY_OVERHEAD + len(keys[i])
    keys_len = pos - keys_off
    vals_off = pos
    val_off = [0] * n
    vpos = 0
    for i in range(n):
        v = cells[i][0]
        vl = len(v) if v is not None else 0
        if padded and 0 < vl <= shard_bytes:
            a = vals_off + vpos
            if a // shard_bytes != (a + vl - 1) // shard_bytes:
                vpos = (a // shard_bytes + 1) * shard_bytes - vals_off
        val_off[i] = vpos
        vpos += vl
    return idx_len, keys_off, keys_len, vals_off, vpos, rec_off, group_off, val_off


def encode_data_page(run: Run, kind: int, page_bytes: int, shard_bytes: int) -> tuple[bytes, SparseIndex]:
    """Serialize a run; returns the used prefix of the page and its sparse index."""
    stride = choose_stride(run, shard_bytes)
    flags = FLAG_PADDED
    lay = _layout(run, stride, shard_bytes, True)
    if lay[3] + lay[4] > page_bytes:
        flags = 0
        lay = _layout(run, stride, shard_bytes, False)
    idx_len, keys_off, keys_len, vals_off, vals_len, rec_off, group_off, val_off = lay
    total = vals_off + vals_len
    if total > page_bytes:
        raise ContractViolation(f"run of {run.nbytes} entry bytes does not fit a {page_bytes}-byte page")
    buf = bytearray(total)
    n = len(run)
    index_count = len(group_off)
    _DATA_HDR.pack_into(buf, 0, DATA_MAGIC, kind, flags, stride, n, index_count, idx_len,
                        keys_off, keys_len, vals_off, vals_len, total, FORMAT_VERSION)
    keys, cells = run.keys, run.cells
    pos = DATA_HEADER_BYTES
    ikeys, iidx = [], []
    for g, off in enumerate(group_off):
        k = keys[g * stride]
        _IDX.pack_into(buf, pos, len(k), g * stride, off)
        pos += _IDX.size
        buf[pos:pos + len(k)] = k
        pos += len(k)
        ikeys.append(k)
        iidx.append(g * stride)
    rec = _REC.pack_into
    for i in range(n):
        k = keys[i]
        v, seq, _ = cells[i]
        o = rec_off[i]
        if v is None:
            rec(buf, o, len(k), FLAG_TOMBSTONE, 0, seq, 0)
        else:
            rec(buf, o, len(k), 0, len(v), seq, val_off[i])
            a = vals_off + val_off[i]
            buf[a:a + len(v)] = v
        buf[o + ENTRY_OVERHEAD:o + ENTRY_OVERHEAD + len(k)] = k
    return bytes(buf), SparseIndex(stride, ikeys, iidx, list(group_off))


def decode_data_header(buf: bytes) -> DataHeader:
    if len(buf) < DATA_HEADER_BYTES:
        raise OpenFailure("short data page header")
    (magic, kind, flags, stride, count, icount, ilen, koff, klen,
     voff, vlen, total, version) = _DATA_HDR.unpack_from(buf, 0)
    if magic != DATA_MAGIC or version != FORMAT_VERSION:
        raise OpenFailure("not a data page (bad magic or version)")
    return DataHeader(kind, flags, stride, count, icount, ilen, koff, klen, voff, vlen, total)


def decode_sparse_index(hdr: DataHeader, buf: bytes, base: int = 0) -> SparseIndex:
    """Parse the index; ``buf`` holds page bytes starting at page offset ``base``."""
    pos = DATA_HEADER_BYTES - base
    keys, idx, offs = [], [], []
    for _ in range(hdr.index_count):
        klen, ei, off = _IDX.unpack_from(buf, pos)
        pos += _IDX.size
        keys.append(bytes(buf[pos:pos + klen]))
        pos += klen
        idx.append(ei)
        offs.append(off)
    return SparseIndex(hdr.stride, keys, idx, offs)


def iter_records(buf, start: int, count: int, base: int = 0):
    """Yield (key, flags, vlen, seq, voff) for ``count`` records from page offset ``start``.

    Records of one index group are contiguous; padding only ever sits
    between groups, so callers walk group by group using the sparse index.
    """
    pos = start - base
    unpack = _REC.unpack_from
    for _ in range(count):
        klen, flags, vlen, seq, voff = unpack(buf, pos)
        k0 = pos + ENTRY_OVERHEAD
        yield bytes(buf[k0:k0 + klen]), flags, vlen, seq, voff
        pos = k0 + klen


def decode_data_page(buf: bytes) -> tuple[DataHeader, Run]:
    hdr = decode_data_header(buf)
    idx = decode_sparse_index(hdr, buf)
    keys, cells = [], []
    vbase = hdr.vals_off
    try:
        for g, off in enumerate(idx.offsets):
            lo, hi = idx.entry_range(g, hdr.count)
            for k, flags, vlen, seq, voff in iter_records(buf, off, hi - lo):
                keys.append(k)
                if flags & FLAG_TOMBSTONE:
                    cells.append((None, seq, ENTRY_OVERHEAD + len(k)))
                else:
                    a = vbase + voff
                    cells.append((bytes(buf[a:a + vlen]), seq, ENTRY_OVERHEAD + len(k) + vlen))
    except struct.error as e:
        raise OpenFailure(f"data page records run past the page: {e}") from e
    return hdr, Run(keys, cells)


# ---------------------------------------------------------------------------
# node pages

_NODE_HDR = struct.Struct("<4sBBBB")
_PIVOT = struct.Struct("<BQQI")
_SEG = struct.Struct("<QQB")
_FUB = struct.Struct("<BI")
_KLEN = struct.Struct("<H")


@dataclass
class NodeRecord:
    """Decoded node page, before child and segment references are resolved."""

    pivots: list[bytes]
    upper: bytes | None
    children: list[tuple[int, int, int]]  # (kind, page id, filter id or 0)
    pending: list[int]
    levels: list[list[tuple[int, int, dict]]]  # (segment page id, active bits, flushed)

    def references(self) -> list[int]:
        refs = []
        for _, pid, fid in self.children:
            refs.append(pid)
            if fid:
                refs.append(fid)
        for level in self.levels:
            refs.extend(pid for pid, _, _ in level)
        return refs


def encode_node(rec: NodeRecord, page_bytes: int) -> bytes:
    out = bytearray()
    out += _NODE_HDR.pack(NODE_MAGIC, FORMAT_VERSION, len(rec.pivots), len(rec.levels),
                          0 if rec.upper is None else 1)
    if rec.upper is not None:
        out += _KLEN.pack(len(rec.upper)) + rec.upper
    for key, (kind, pid, fid), pend in zip(rec.pivots, rec.children, rec.pending):
        out += _KLEN.pack(len(key)) + key
        out += _PIVOT.pack(kind, pid, fid, pend)
    for level in rec.levels:
        out.append(len(level))
        for pid, active, flushed in level:
            out += _SEG.pack(pid, active, len(flushed))
            for p in sorted(flushed):
                out += _FUB.pack(p, flushed[p])
    if len(out) > page_bytes:
        raise ContractViolation(f"node encodes to {len(out)} bytes > {page_bytes}")
    return bytes(out)


def decode_node(buf: bytes) -> NodeRecord:
    magic, version, npiv, nlev, has_upper = _NODE_HDR.unpack_from(buf, 0)
    if magic != NODE_MAGIC or version != FORMAT_VERSION:
        raise OpenFailure("not a node page (bad magic or version)")
    pos = _NODE_HDR.size
    upper = None
    if has_upper:
        (klen,) = _KLEN.unpack_from(buf, pos)
        pos += 2
        upper = bytes(buf[pos:pos + klen])
        pos += klen
    pivots, children, pending = [], [], []
    for _ in range(npiv):
        (klen,) = _KLEN.unpack_from(buf, pos)
        pos += 2
        pivots.append(bytes(buf[pos:pos + klen]))
        pos += klen
        kind, pid, fid, pend = _PIVOT.unpack_from(buf, pos)
        pos += _PIVOT.size
        children.append((kind, pid, fid))
        pending.append(pend)
    levels = []
    for _ in range(nlev):
        nseg = buf[pos]
        pos += 1
        level = []
        for _ in range(nseg):
            pid, active, nf = _SEG.unpack_from(buf, pos)
            pos += _SEG.size
            flushed = {}
            for _ in range(nf):
                p, idx = _FUB.unpack_from(buf, pos)
                pos += _FUB.size
                flushed[p] = idx
            level.append((pid, active, flushed))
        levels.append(level)
    return NodeRecord(pivots, upper, children, pending, levels)
