import threading

import pytest

from turtlekv.errors import ContractViolation, OutOfSpace, UseAfterFree
from turtlekv.pagestore import (
    PRIORITY_LEAF,
    PRIORITY_NODE,
    PageCache,
    PageStore,
    ShardKey,
    make_page_id,
    page_bytes_of,
    slot_of,
)


@pytest.fixture
def store(tmp_path):
    s = PageStore(str(tmp_path), 4096, 1 << 20, capacity=64)
    yield s
    s.close()


def test_page_id_encodes_size_class_and_slot():
    pid = make_page_id(65536, 17)
    assert page_bytes_of(pid) == 65536 and slot_of(pid) == 17
    assert make_page_id(4096, 17) != pid


def test_write_read_round_trip_and_zero_tail(store):
    pid = store.write_page(16384, b"hello", kind="leaf")
    assert store.used[pid] == 4096  # rounded up to one shard
    assert store.read_range(pid, 0, 5) == b"hello"
    assert store.read_range(pid, 8000, 16) == bytes(16)


def test_refcounts_free_and_reuse_slot(store):
    a = store.write_page(4096, b"a")
    store.incref(a)
    assert store.decref(a) == 1 and store.is_live(a)
    assert store.decref(a) == 0 and not store.is_live(a)
    with pytest.raises(UseAfterFree):
        store.read_page(a, PRIORITY_LEAF, "leaf")
    with pytest.raises(UseAfterFree):
        store.incref(a)
    with pytest.raises(ContractViolation):
        store.decref(a)
    b = store.write_page(4096, b"b")
    assert slot_of(b) == slot_of(a)


def test_apply_delta_never_goes_negative(store):
    p = store.write_page(4096, b"x")
    assert store.apply_delta(p, 2) == 3
    with pytest.raises(ContractViolation):
        store.apply_delta(p, -4)
    assert store.apply_delta(p, -3) == 0
    assert store.live_pages() == 0


def test_pool_exhaustion_is_out_of_space(store):
    for _ in range(64):
        store.write_page(4096, b"z")
    with pytest.raises(OutOfSpace):
        store.write_page(4096, b"z")


def test_oversized_write_rejected(store):
    with pytest.raises(ContractViolation):
        store.write_page(4096, bytes(4097))


def test_restore_rebuilds_allocator(tmp_path):
    s = PageStore(str(tmp_path), 4096, 1 << 20, capacity=64)
    pids = [s.write_page(4096, bytes([i]) * 10) for i in range(5)]
    s.close()
    t = PageStore(str(tmp_path), 4096, 1 << 20, capacity=64)
    keep = {pids[1]: 1, pids[3]: 2}
    t.restore(keep, {})
    assert t.read_range(pids[3], 0, 10) == bytes([3]) * 10
    reused = {slot_of(t.write_page(4096, b"n")) for _ in range(3)}
    assert reused == {0, 2, 4}
    t.close()


def test_sharded_read_touches_only_one_shard(store):
    data = bytes(range(256)) * 256  # 64 KiB
    pid = store.write_page(65536, data, kind="leaf")
    store.cache.clear()
    before = store.stats.snapshot().get("shard_bytes_read", 0)
    assert store.read_range(pid, 9000, 100) == data[9000:9100]
    after = store.stats.snapshot().get("shard_bytes_read", 0)
    assert after - before == 4096
    store.read_range(pid, 9000, 100)  # second read is a cache hit
    assert store.stats.snapshot().get("shard_bytes_read", 0) == after


def test_free_invalidates_cached_shards(store):
    pid = store.write_page(8192, b"q" * 8000)
    store.read_range(pid, 0, 10)
    store.read_range(pid, 5000, 10)
    assert len(store.cache) == 2
    store.decref(pid)
    assert len(store.cache) == 0


def test_concurrent_readers_see_consistent_bytes(store):
    pids = [store.write_page(16384, bytes([i]) * 16384) for i in range(8)]
    errors = []

    def reader(seed):
        for j in range(300):
            i = (seed + j) % 8
            if store.read_range(pids[i], (j * 977) % 16000, 100) != bytes([i]) * 100:
                errors.append(i)

    ts = [threading.Thread(target=reader, args=(s,)) for s in range(4)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert not errors


class TestClock:
    def key(self, i):
        return ShardKey(i, 0, 100)

    def test_budget_is_respected(self):
        c = PageCache(1000)
        for i in range(30):
            c.put(self.key(i), bytes(100), PRIORITY_LEAF)
        assert c.total <= 1000 and len(c) == 10

    def test_higher_priority_class_outlives_leaves(self):
        c = PageCache(500)
        c.put(self.key(0), bytes(100), PRIORITY_NODE)
        for i in range(1, 40):
            c.put(self.key(i), bytes(100), PRIORITY_LEAF)
            c.get(self.key(0))  # node stays hot
        assert c.get(self.key(0)) is not None

    def test_pinned_entries_are_never_evicted(self):
        c = PageCache(300)
        c.put(self.key(0), bytes(100), PRIORITY_LEAF)
        c.pin(self.key(0))
        for i in range(1, 20):
            c.put(self.key(i), bytes(100), PRIORITY_LEAF)
        assert c.get(self.key(0)) is not None
        c.unpin(self.key(0))
        with pytest.raises(ContractViolation):
            c.unpin(self.key(0))

    def test_all_pinned_evict_step_returns_none(self):
        c = PageCache(10_000)
        for i in range(3):
            c.put(self.key(i), bytes(100), PRIORITY_LEAF)
            c.pin(self.key(i))
        assert c.evict_step() is None
        assert len(c) == 3

    def test_clock_evicts_cold_before_recently_hit(self):
        c = PageCache(10_000)
        for i in range(4):
            c.put(self.key(i), bytes(100), PRIORITY_LEAF)
        for e in c.ring.values():  # as if the hand had already swept once
            e.priority = 0
        c.get(self.key(0))
        assert c.evict_step() == self.key(1)
