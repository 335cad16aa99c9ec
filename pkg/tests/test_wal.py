import os
import random
import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from turtlekv.errors import InvalidParameter, IOFailure, RecordTooLarge, RecoveryHalt
from turtlekv.wal import FILE_HEADER_BYTES, WriteAheadLog, recover

BLOCK = 4096


@pytest.fixture
def path(tmp_path):
    return str(tmp_path / "wal.log")


def fill(wal, n, seed=0):
    rnd = random.Random(seed)
    out = []
    for i in range(n):
        k = b"key-%d" % rnd.randrange(10_000)
        v = None if rnd.random() < 0.1 else rnd.randbytes(rnd.randint(0, 200))
        out.append((wal.append(k, v), k, v))
    return out


def test_seqs_are_consecutive(path):
    w = WriteAheadLog.create(path, BLOCK)
    seqs = [s for s, _, _ in fill(w, 50)]
    assert seqs == list(range(1, 51))
    assert w.durable_seq == 0
    assert w.flush_blocks() == 50


def test_round_trip_after_close(path):
    w = WriteAheadLog.create(path, BLOCK)
    appended = fill(w, 100)
    w.close()
    got = recover(path).updates
    assert [(u.seq, u.key, u.value) for u in got] == appended


def test_concurrent_producers_get_a_contiguous_seq_range(path):
    w = WriteAheadLog.create(path, BLOCK)
    per = [[] for _ in range(4)]

    def producer(i):
        for j in range(500):
            per[i].append(w.append(b"t%d-%d" % (i, j), b"v" * (j % 50)))

    ts = [threading.Thread(target=producer, args=(i,)) for i in range(4)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    all_seqs = sorted(s for p in per for s in p)
    assert all_seqs == list(range(1, 2001))
    assert all(p == sorted(p) for p in per)
    assert w.flush_blocks() == 2000
    w.close()
    assert [u.seq for u in recover(path).updates] == all_seqs


def test_background_flusher_advances_durable_seq(path):
    w = WriteAheadLog.create(path, BLOCK)
    w.start_flusher(0.005)
    fill(w, 30)
    for _ in range(200):
        if w.durable_seq == 30:
            break
        threading.Event().wait(0.01)
    w.close()
    assert w.durable_seq == 30


def test_torn_last_block_is_skipped(path):
    w = WriteAheadLog.create(path, BLOCK)
    fill(w, 40)
    w.flush_blocks()
    first = w.durable_seq
    fill(w, 40, seed=1)
    w.flush_blocks()
    w.close()
    size = os.path.getsize(path)
    with open(path, "r+b") as f:
        f.seek(size - BLOCK + 40)
        f.write(b"\xff" * 16)  # damage the last block's records
    got = recover(path).updates
    assert [u.seq for u in got] == list(range(1, len(got) + 1))
    assert first <= len(got) < 80


def test_truncated_file_recovers_whole_blocks(path):
    w = WriteAheadLog.create(path, BLOCK)
    fill(w, 200)
    w.close()
    full = recover(path)
    with open(path, "r+b") as f:
        f.truncate(os.path.getsize(path) - 100)
    got = recover(path)
    assert got.blocks == full.blocks - 1
    assert [u.seq for u in got.updates] == [u.seq for u in full.updates[:len(got.updates)]]


@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_random_corruption_yields_a_prefix(tmp_path_factory, seed, flips):
    p = str(tmp_path_factory.mktemp("w") / "wal.log")
    w = WriteAheadLog.create(p, 1024)
    appended = fill(w, 120, seed=seed % 1000)
    w.close()
    data = bytearray(open(p, "rb").read())
    rnd = random.Random(seed)
    for _ in range(flips):
        i = rnd.randrange(FILE_HEADER_BYTES, len(data))
        data[i] ^= 1 << rnd.randrange(8)
    open(p, "wb").write(bytes(data))
    got = [(u.seq, u.key, u.value) for u in recover(p).updates]
    assert got == appended[:len(got)]


def test_damaged_header_halts_recovery(path):
    WriteAheadLog.create(path, BLOCK).close()
    with open(path, "r+b") as f:
        f.write(b"XXXX")
    with pytest.raises(RecoveryHalt) as e:
        recover(path)
    assert e.value.offset == 0


def test_record_too_large(path):
    w = WriteAheadLog.create(path, 1024)
    with pytest.raises(RecordTooLarge):
        w.append(b"k", b"v" * 1024)
    assert w.append(b"k", b"v") == 1  # no seq was consumed


def test_trim_rules(path):
    w = WriteAheadLog.create(path, BLOCK)
    fill(w, 100)
    with pytest.raises(InvalidParameter):
        w.trim(10)  # nothing checkpointed yet
    w.note_checkpoint(60)
    w.flush_blocks()
    before = w.file_bytes()
    assert w.trim(60) > 0
    assert w.trim(60) == 0  # idempotent
    assert w.trim(30) == 0
    assert w.file_bytes() < before
    w.close()
    got = recover(path)
    assert got.base_seq == 60
    assert [u.seq for u in got.updates] == list(range(61, 101))


def test_open_resumes_after_floor(path):
    w = WriteAheadLog.create(path, BLOCK)
    appended = fill(w, 90)
    w.close()
    w2, ups = WriteAheadLog.open(path, BLOCK, floor=50)
    assert [(u.seq, u.key, u.value) for u in ups] == appended[50:]
    assert w2.append(b"next", b"x") == 91
    w2.close()


def test_failed_sync_keeps_records_for_retry(path):
    w = WriteAheadLog.create(path, BLOCK)
    fill(w, 10)

    def boom(phase):
        raise OSError("sync failed")

    w.fail_hook = boom
    with pytest.raises(IOFailure):
        w.flush_blocks()
    assert w.durable_seq == 0
    w.fail_hook = None
    assert w.flush_blocks() == 10
    w.close()
    assert [u.seq for u in recover(path).updates] == list(range(1, 11))
