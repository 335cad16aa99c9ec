"""Write-ahead log of fixed-size hashed blocks.

File header ``<4sIIIQQ``: magic, version, hash id, block size, base seq and
an xxh64 of the preceding fields.  Blocks follow back to back, each
``block_bytes`` long::

    [block header 32B][slot directory: u32 offset per record][records][zeros]

The block header is ``<QHIQ`` (block seq, record count, payload length,
xxh64 of everything after the header up to the block end, zero padding
included).  Only the used prefix of a block is written; the tail is a file
hole that reads as zeros.  Records are ``<QBHI`` (seq, flags, key length,
value length) followed by key and value bytes, and never span blocks.

Each producer thread fills its own buffer; the flusher (a background thread
or an explicit ``flush_blocks`` call) steals buffers, writes them as blocks
and syncs.  The durable horizon is the highest seq below which every seq has
been written, so a reported horizon is always a prefix-consistent cut.
"""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass

import xxhash

from .errors import InvalidParameter, IOFailure, RecordTooLarge, RecoveryHalt
from .model import Update

WAL_MAGIC = b"TKWL"
WAL_VERSION = 1
HASH_XXH64 = 1
_FILE_HDR = struct.Struct("<4sIIIQ")
_FILE_HASH = struct.Struct("<Q")
FILE_HEADER_BYTES = 64
_BLK_HDR = struct.Struct("<QHIQ")
BLOCK_HEADER_BYTES = 32
_SLOT = struct.Struct("<I")
_REC = struct.Struct("<QBHI")
FLAG_TOMBSTONE = 1


def encode_record(u: Update) -> bytes:
    v = u.value if u.value is not None else b""
    flags = FLAG_TOMBSTONE if u.value is None else 0
    return _REC.pack(u.seq, flags, len(u.key), len(v)) + u.key + v


def record_cost(key: bytes, value: bytes | None) -> int:
    return _SLOT.size + _REC.size + len(key) + (len(value) if value is not None else 0)


def build_block(block_seq: int, records: list[bytes], block_bytes: int) -> tuple[bytes, int]:
    """Return (used prefix of the block, hash) for the given records."""
    n = len(records)
    dir_len = n * _SLOT.size
    offs, pos = [], BLOCK_HEADER_BYTES + dir_len
    for r in records:
        offs.append(pos)
        pos += len(r)
    if pos > block_bytes:
        raise RecordTooLarge("records exceed the block payload")
    body = b"".join(_SLOT.pack(o) for o in offs) + b"".join(records)
    h = xxhash.xxh64()
    h.update(body)
    h.update(bytes(block_bytes - BLOCK_HEADER_BYTES - len(body)))
    digest = h.intdigest()
    hdr = _BLK_HDR.pack(block_seq, n, len(body), digest).ljust(BLOCK_HEADER_BYTES, b"\0")
    return hdr + body, digest


def parse_block(blob: bytes, block_bytes: int):
    """Records of a block, or None if the block is torn or corrupt."""
    if len(blob) < block_bytes:
        return None
    bseq, n, plen, digest = _BLK_HDR.unpack_from(blob, 0)
    if BLOCK_HEADER_BYTES + plen > block_bytes or n * _SLOT.size > plen:
        return None
    if xxhash.xxh64_intdigest(blob[BLOCK_HEADER_BYTES:block_bytes]) != digest:
        return None
    out = []
    for i in range(n):
        (off,) = _SLOT.unpack_from(blob, BLOCK_HEADER_BYTES + i * _SLOT.size)
        seq, flags, klen, vlen = _REC.unpack_from(blob, off)
        k0 = off + _REC.size
        key = bytes(blob[k0:k0 + klen])
        val = None if flags & FLAG_TOMBSTONE else bytes(blob[k0 + klen:k0 + klen + vlen])
        out.append(Update(key, val, seq))
    return bseq, out


@dataclass
class WalContents:
    base_seq: int
    block_bytes: int
    updates: list  # contiguous seq prefix after the floor, ascending
    blocks: int
    valid_bytes: int


def read_header(data: bytes) -> tuple[int, int]:
    if len(data) < FILE_HEADER_BYTES:
        raise RecoveryHalt("WAL header truncated", 0)
    magic, version, hid, block_bytes, base = _FILE_HDR.unpack_from(data, 0)
    (h,) = _FILE_HASH.unpack_from(data, _FILE_HDR.size)
    if magic != WAL_MAGIC or xxhash.xxh64_intdigest(data[:_FILE_HDR.size]) != h:
        raise RecoveryHalt("WAL header unreadable", 0)
    if version != WAL_VERSION or hid != HASH_XXH64:
        raise RecoveryHalt(f"unsupported WAL version {version} / hash {hid}", 0)
    return block_bytes, base


def scan_blocks(data: bytes, block_bytes: int):
    """Yield (updates, end offset) for each valid block in sequence."""
    pos = FILE_HEADER_BYTES
    expect = None
    while pos + block_bytes <= len(data):
        parsed = parse_block(data[pos:pos + block_bytes], block_bytes)
        if parsed is None:
            return
        bseq, ups = parsed
        if expect is not None and bseq != expect:
            return
        expect = bseq + 1
        pos += block_bytes
        yield ups, pos


def recover(path: str, floor: int | None = None) -> WalContents:
    """Updates with seq above ``floor`` (default: the file's base seq).

    Scanning stops at the first block that is short, fails its hash or
    breaks the block sequence; only the contiguous run of seqs starting at
    ``floor + 1`` is returned.
    """
    with open(path, "rb") as f:
        data = f.read()
    block_bytes, base = read_header(data)
    floor = base if floor is None else max(floor, base)
    found: dict[int, Update] = {}
    nblocks, pos = 0, FILE_HEADER_BYTES
    for ups, pos in scan_blocks(data, block_bytes):
        nblocks += 1
        for u in ups:
            if u.seq > floor:
                found[u.seq] = u
    out = []
    s = floor + 1
    while s in found:
        out.append(found[s])
        s += 1
    return WalContents(base, block_bytes, out, nblocks, pos)


class _Producer:
    __slots__ = ("lock", "records", "size")

    def __init__(self):
        self.lock = threading.Lock()
        self.records: list[bytes] = []
        self.size = 0


class WriteAheadLog:
    def __init__(self, path: str, block_bytes: int, stats=None):
        self.path = path
        self.block_bytes = block_bytes
        self.payload_bytes = block_bytes - BLOCK_HEADER_BYTES
        self.stats = stats
        self._local = threading.local()
        self._producers: list[_Producer] = []
        self._reg_lock = threading.Lock()
        self._io_lock = threading.RLock()
        self._sealed: list[list[bytes]] = []
        self._sealed_lock = threading.Lock()
        self._next_seq = 1
        self._seq_lock = threading.Lock()
        self._written: set[int] = set()
        self.durable_seq = 0
        self.base_seq = 0
        self.checkpoint_seq = 0
        self.fd = None
        self.next_block = 0
        self.end = FILE_HEADER_BYTES
        self._thread = None
        self._stop = threading.Event()
        self.fail_hook = None  # test hook called with a phase name before syncs

    # -- lifecycle

    @classmethod
    def create(cls, path: str, block_bytes: int, base_seq: int = 0, stats=None) -> "WriteAheadLog":
        w = cls(path, block_bytes, stats)
        w._rewrite_file(base_seq, [])
        w._set_counter(base_seq)
        return w

    @classmethod
    def open(cls, path: str, block_bytes: int, floor: int, stats=None) -> tuple["WriteAheadLog", list]:
        """Recover updates after ``floor`` and rewrite the file to hold only them."""
        contents = recover(path, floor)
        if contents.block_bytes != block_bytes:
            block_bytes = contents.block_bytes
        w = cls(path, block_bytes, stats)
        w._rewrite_file(floor, contents.updates)
        last = contents.updates[-1].seq if contents.updates else floor
        w._set_counter(last)
        w.checkpoint_seq = floor
        return w, contents.updates

    def _set_counter(self, last_seq: int) -> None:
        self._next_seq = last_seq + 1
        self.durable_seq = last_seq
        self._written = set()

    @property
    def last_assigned(self) -> int:
        return self._next_seq - 1

    def _rewrite_file(self, base_seq: int, updates: list) -> int:
        """Atomically replace the file with a header and the given updates."""
        tmp = self.path + ".tmp"
        hdr = _FILE_HDR.pack(WAL_MAGIC, WAL_VERSION, HASH_XXH64, self.block_bytes, base_seq)
        hdr = (hdr + _FILE_HASH.pack(xxhash.xxh64_intdigest(hdr))).ljust(FILE_HEADER_BYTES, b"\0")
        try:
            fd = os.open(tmp, os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o644)
            os.write(fd, hdr)
            end, nblk, written = FILE_HEADER_BYTES, 0, len(hdr)
            for group in self._pack([encode_record(u) for u in updates]):
                blob, _ = build_block(nblk, group, self.block_bytes)
                os.pwrite(fd, blob, end)
                written += len(blob)
                end += self.block_bytes
                nblk += 1
            os.ftruncate(fd, end)
            os.fsync(fd)
            os.replace(tmp, self.path)
            dfd = os.open(os.path.dirname(os.path.abspath(self.path)), os.O_RDONLY)
            os.fsync(dfd)
            os.close(dfd)
        except OSError as e:
            raise IOFailure(f"WAL rewrite failed: {e}") from e
        old_size = os.fstat(self.fd).st_size if self.fd is not None else 0
        if self.fd is not None:
            os.close(self.fd)
        self.fd = os.open(self.path, os.O_RDWR)
        self.base_seq = base_seq
        self.next_block = nblk
        self.end = end
        if self.stats is not None:
            self.stats.record_write("wal", written)
        return old_size - end

    def _pack(self, records: list[bytes]):
        group, size = [], 0
        for r in records:
            cost = len(r) + _SLOT.size
            if group and size + cost > self.payload_bytes:
                yield group
                group, size = [], 0
            group.append(r)
            size += cost
        if group:
            yield group

    def start_flusher(self, interval_s: float) -> None:
        if self._thread is not None or interval_s <= 0:
            return
        self._stop.clear()

        def loop():
            while not self._stop.wait(interval_s):
                try:
                    self.flush_blocks()
                except IOFailure:
                    pass  # retried on the next tick; durable_seq does not advance

        self._thread = threading.Thread(target=loop, name="wal-flusher", daemon=True)
        self._thread.start()

    def stop_flusher(self) -> None:
        if self._thread is not None:
            self._stop.set()
            self._thread.join()
            self._thread = None

    def close(self) -> None:
        self.stop_flusher()
        self.flush_blocks()
        if self.fd is not None:
            os.close(self.fd)
            self.fd = None

    # -- producers

    def _producer(self) -> _Producer:
        p = getattr(self._local, "p", None)
        if p is None:
            p = self._local.p = _Producer()
            with self._reg_lock:
                self._producers.append(p)
        return p

    def append(self, key: bytes, value: bytes | None) -> int:
        """Buffer an update and return its newly assigned seq."""
        rec_len = _REC.size + len(key) + (len(value) if value is not None else 0)
        cost = rec_len + _SLOT.size
        if cost > self.payload_bytes:
            raise RecordTooLarge(f"record of {rec_len} bytes exceeds the WAL block payload")
        p = self._producer()
        with p.lock:
            if p.size + cost > self.payload_bytes:
                with self._sealed_lock:
                    self._sealed.append(p.records)
                p.records, p.size = [], 0
            with self._seq_lock:
                seq = self._next_seq
                self._next_seq = seq + 1
            p.records.append(encode_record(Update(key, value, seq)))
            p.size += cost
            if p.size == self.payload_bytes:
                with self._sealed_lock:
                    self._sealed.append(p.records)
                p.records, p.size = [], 0
        return seq

    # -- flushing

    def flush_blocks(self) -> int:
        """Write and sync every sealed or buffered record; return the durable seq."""
        with self._io_lock:
            with self._reg_lock:
                producers = list(self._producers)
            for p in producers:
                with p.lock:
                    if p.records:
                        with self._sealed_lock:
                            self._sealed.append(p.records)
                        p.records, p.size = [], 0
            with self._sealed_lock:
                groups, self._sealed = self._sealed, []
            if not groups:
                return self.durable_seq
            seqs = []
            try:
                for group in groups:
                    blob, _ = build_block(self.next_block, group, self.block_bytes)
                    os.pwrite(self.fd, blob, self.end)
                    os.ftruncate(self.fd, self.end + self.block_bytes)
                    if self.stats is not None:
                        self.stats.record_write("wal", len(blob))
                    self.end += self.block_bytes
                    self.next_block += 1
                    seqs.extend(_REC.unpack_from(r, 0)[0] for r in group)
                if self.fail_hook is not None:
                    self.fail_hook("wal-sync")
                os.fsync(self.fd)
            except OSError as e:
                with self._sealed_lock:
                    self._sealed[:0] = groups
                raise IOFailure(f"WAL write failed: {e}") from e
            self._written.update(seqs)
            d = self.durable_seq
            while d + 1 in self._written:
                d += 1
                self._written.discard(d)
            self.durable_seq = d
            return d

    def trim(self, upto_seq: int) -> int:
        """Drop records with seq <= upto_seq; returns bytes reclaimed."""
        if upto_seq > self.checkpoint_seq:
            raise InvalidParameter("cannot trim past the last checkpoint's coverage")
        if upto_seq <= self.base_seq:
            return 0
        with self._io_lock:
            # after this flush every assigned seq is in the file
            self.flush_blocks()
            with open(self.path, "rb") as f:
                data = f.read()
            keep = [u for ups, _ in scan_blocks(data, self.block_bytes) for u in ups if u.seq > upto_seq]
            keep.sort(key=lambda u: u.seq)
            return self._rewrite_file(upto_seq, keep)

    def note_checkpoint(self, seq: int) -> None:
        self.checkpoint_seq = max(self.checkpoint_seq, seq)

    def file_bytes(self) -> int:
        return os.fstat(self.fd).st_size if self.fd is not None else 0
