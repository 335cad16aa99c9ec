"""Checkpoint manifest: an append-only log of hashed records.

File layout: a header ``<4sII`` (magic, version, hash id) and then records,
each ``<I`` payload length, payload, ``<Q`` xxh64 of the payload.  Payload
kinds:

``S`` snapshot
    full state: generation, root, seq bound, height, every live page with its
    count and used bytes.  Always the first record after compaction.
``P`` prepare (phase one)
    a candidate checkpoint: generation, root, seq bound, height and the
    refcount deltas that take the previous checkpoint to it.
``C`` commit (phase two)
    the generation being committed.

Recovery replays snapshot and committed prepares in order, stops at the first
record that is short or fails its hash, and drops a trailing uncommitted
prepare.  Compaction writes a fresh snapshot to a temporary file and renames
it over the old one.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import xxhash

from .errors import IOFailure, OpenFailure

MANIFEST_MAGIC = b"TKMF"
MANIFEST_VERSION = 1
HASH_XXH64 = 1
_HDR = struct.Struct("<4sII")
_LEN = struct.Struct("<I")
_HASH = struct.Struct("<Q")
_ROOT = struct.Struct("<cQBQQQI")  # tag, generation, root kind, root id, filter id, seq bound, height
_DELTA = struct.Struct("<QiI")
_COMMIT = struct.Struct("<cQ")


@dataclass
class RootInfo:
    generation: int = 0
    kind: int = 0  # 0 empty, 1 leaf, 2 node
    page_id: int = 0
    filter_id: int = 0
    seq_upper_bound: int = 0
    height: int = 0


@dataclass
class ManifestState:
    root: RootInfo = field(default_factory=RootInfo)
    refcounts: dict = field(default_factory=dict)
    used: dict = field(default_factory=dict)
    valid_bytes: int = 0


def _root_payload(tag: bytes, r: RootInfo) -> bytes:
    return _ROOT.pack(tag, r.generation, r.kind, r.page_id, r.filter_id, r.seq_upper_bound, r.height)


def encode_prepare(root: RootInfo, deltas: list[tuple[int, int, int]], tag: bytes = b"P") -> bytes:
    out = bytearray(_root_payload(tag, root))
    out += _LEN.pack(len(deltas))
    for d in deltas:
        out += _DELTA.pack(*d)
    return bytes(out)


def encode_snapshot(root: RootInfo, refcounts: dict, used: dict) -> bytes:
    entries = [(p, c, used.get(p, 0)) for p, c in sorted(refcounts.items())]
    return encode_prepare(root, entries, tag=b"S")


def _decode_root(payload: bytes) -> tuple[bytes, RootInfo, list]:
    tag, gen, kind, pid, fid, seq, height = _ROOT.unpack_from(payload, 0)
    pos = _ROOT.size
    (n,) = _LEN.unpack_from(payload, pos)
    pos += _LEN.size
    deltas = [_DELTA.unpack_from(payload, pos + i * _DELTA.size) for i in range(n)]
    return tag, RootInfo(gen, kind, pid, fid, seq, height), deltas


def frame(payload: bytes) -> bytes:
    return _LEN.pack(len(payload)) + payload + _HASH.pack(xxhash.xxh64_intdigest(payload))


def read_manifest(path: str) -> ManifestState:
    """Replay a manifest file; pure function of its bytes."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HDR.size:
        raise OpenFailure("manifest header truncated")
    magic, version, hid = _HDR.unpack_from(data, 0)
    if magic != MANIFEST_MAGIC:
        raise OpenFailure("manifest has a bad magic number")
    if version != MANIFEST_VERSION or hid != HASH_XXH64:
        raise OpenFailure(f"unsupported manifest version {version} / hash {hid}")
    st = ManifestState()
    pos = _HDR.size
    pending = None
    valid = pos
    while pos + _LEN.size <= len(data):
        (n,) = _LEN.unpack_from(data, pos)
        end = pos + _LEN.size + n + _HASH.size
        if end > len(data):
            break
        payload = data[pos + _LEN.size:pos + _LEN.size + n]
        (h,) = _HASH.unpack_from(data, end - _HASH.size)
        if n == 0 or xxhash.xxh64_intdigest(payload) != h:
            break
        tag = payload[:1]
        if tag == b"S":
            _, root, entries = _decode_root(payload)
            st.root = root
            st.refcounts = {p: c for p, c, _ in entries}
            st.used = {p: u for p, _, u in entries}
            pending = None
            valid = end
        elif tag == b"P":
            pending = _decode_root(payload)[1:]
        elif tag == b"C":
            _, gen = _COMMIT.unpack_from(payload, 0)
            if pending is None or pending[0].generation != gen:
                raise OpenFailure(f"commit for generation {gen} without its prepare record")
            root, deltas = pending
            for pid, delta, used in deltas:
                c = st.refcounts.get(pid, 0) + delta
                if c < 0:
                    raise OpenFailure(f"manifest drives refcount of {pid:#x} negative")
                if c:
                    st.refcounts[pid] = c
                    if used:
                        st.used[pid] = used
                else:
                    st.refcounts.pop(pid, None)
                    st.used.pop(pid, None)
            st.root = root
            pending = None
            valid = end
        else:
            break
        pos = end
    st.valid_bytes = valid
    return st


class Manifest:
    """Writer side of the manifest log."""

    def __init__(self, path: str, compact_bytes: int, stats=None):
        self.path = path
        self.compact_bytes = compact_bytes
        self.stats = stats
        self.fd = None
        self.size = 0
        self.fail_hook = None  # test hook: called with a phase name before each sync

    @classmethod
    def create(cls, path: str, compact_bytes: int, stats=None) -> "Manifest":
        m = cls(path, compact_bytes, stats)
        m._rewrite(RootInfo(), {}, {})
        return m

    @classmethod
    def open(cls, path: str, compact_bytes: int, stats=None) -> tuple["Manifest", ManifestState]:
        st = read_manifest(path)
        m = cls(path, compact_bytes, stats)
        m.fd = os.open(path, os.O_RDWR)
        os.ftruncate(m.fd, st.valid_bytes)  # drop torn or uncommitted tail
        os.fsync(m.fd)
        m.size = st.valid_bytes
        return m, st

    def _rewrite(self, root: RootInfo, refcounts: dict, used: dict) -> None:
        tmp = self.path + ".tmp"
        blob = _HDR.pack(MANIFEST_MAGIC, MANIFEST_VERSION, HASH_XXH64) + frame(
            encode_snapshot(root, refcounts, used)
        )
        try:
            fd = os.open(tmp, os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o644)
            os.write(fd, blob)
            os.fsync(fd)
            os.close(fd)
            os.replace(tmp, self.path)
            dfd = os.open(os.path.dirname(os.path.abspath(self.path)), os.O_RDONLY)
            os.fsync(dfd)
            os.close(dfd)
        except OSError as e:
            raise IOFailure(f"manifest rewrite failed: {e}") from e
        if self.fd is not None:
            os.close(self.fd)
        self.fd = os.open(self.path, os.O_RDWR)
        self.size = len(blob)
        if self.stats is not None:
            self.stats.record_write("manifest", len(blob))

    def _append(self, payload: bytes, phase: str) -> None:
        rec = frame(payload)
        if self.fail_hook is not None:
            self.fail_hook(phase + "-write", rec)
        try:
            os.pwrite(self.fd, rec, self.size)
            self.size += len(rec)
            if self.fail_hook is not None:
                self.fail_hook(phase, rec)
            os.fsync(self.fd)
        except OSError as e:
            raise IOFailure(f"manifest append failed: {e}") from e
        if self.stats is not None:
            self.stats.record_write("manifest", len(rec))

    def prepare(self, root: RootInfo, deltas: list[tuple[int, int, int]]) -> None:
        self._append(encode_prepare(root, deltas), "prepare")

    def commit(self, generation: int) -> None:
        self._append(_COMMIT.pack(b"C", generation), "commit")

    def maybe_compact(self, root: RootInfo, refcounts: dict, used: dict) -> bool:
        if self.size < self.compact_bytes:
            return False
        self._rewrite(root, refcounts, used)
        return True

    def close(self) -> None:
        if self.fd is not None:
            os.close(self.fd)
            self.fd = None
