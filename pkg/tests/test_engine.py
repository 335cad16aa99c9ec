import os
import random

import pytest

from conftest import small_config
from turtlekv import KVStore
from turtlekv.errors import ContractViolation, InvalidArgument, InvalidParameter, OpenFailure


def open_store(path, **kw):
    return KVStore.open(str(path), small_config(**kw.pop("cfg", {})), **kw)


def mixed_ops(seed, n, keyspace=2000):
    rnd = random.Random(seed)
    for _ in range(n):
        k = b"key%05d" % rnd.randrange(keyspace)
        if rnd.random() < 0.15:
            yield k, None
        else:
            yield k, rnd.randbytes(rnd.randint(0, 60))


def apply(store, ops, oracle):
    for k, v in ops:
        if v is None:
            store.delete(k)
            oracle.pop(k, None)
        else:
            store.put(k, v)
            oracle[k] = v


def test_put_get_delete_scan(tmp_path):
    with open_store(tmp_path) as s:
        s.put(b"b", b"2")
        s.put(b"a", b"1")
        s.put(b"c", b"3")
        s.delete(b"b")
        assert s.get(b"a") == b"1" and s.get(b"b") is None
        assert s.contains(b"c") and not s.contains(b"b")
        assert s.scan(b"", 10) == [(b"a", b"1"), (b"c", b"3")]
        assert s.scan(b"b", 1) == [(b"c", b"3")]
        assert s.scan(b"", 0) == []


def test_seqs_are_monotonic(tmp_path):
    with open_store(tmp_path) as s:
        seqs = [s.put(b"k%d" % i, b"v") for i in range(10)] + [s.delete(b"k1")]
        assert seqs == list(range(1, 12)) and s.last_seq == 11


@pytest.mark.parametrize("chi", [1, 4])
def test_matches_oracle_across_rotations_and_checkpoints(tmp_path, chi):
    oracle = {}
    with open_store(tmp_path, chi=chi) as s:
        apply(s, mixed_ops(chi, 6000), oracle)
        assert s.counters.snapshot().get("checkpoints", 0) > 0
        assert s.items() == sorted(oracle.items())
        rnd = random.Random(5)
        for _ in range(500):
            k = b"key%05d" % rnd.randrange(2000)
            assert s.get(k) == oracle.get(k)
        start = b"key01000"
        assert s.scan(start, 37) == [kv for kv in sorted(oracle.items()) if kv[0] >= start][:37]


def test_reopen_after_clean_close(tmp_path):
    oracle = {}
    s = open_store(tmp_path, chi=3)
    apply(s, mixed_ops(1, 4000), oracle)
    s.close()
    with open_store(tmp_path) as s2:
        assert s2.items() == sorted(oracle.items())
        assert s2.last_seq == 4000


def test_crash_recovers_every_synced_update(tmp_path):
    oracle = {}
    s = open_store(tmp_path, chi=4)
    ops = list(mixed_ops(2, 5000))
    apply(s, ops[:4000], oracle)
    durable = s.sync()
    assert durable == 4000
    synced = dict(oracle)
    apply(s, ops[4000:], oracle)  # never synced
    s.abandon()
    with open_store(tmp_path) as s2:
        n = s2.last_seq
        assert n >= durable
        replayed = dict(synced)
        for k, v in ops[4000:n]:
            if v is None:
                replayed.pop(k, None)
            else:
                replayed[k] = v
        assert s2.items() == sorted(replayed.items())


def test_chi_is_observationally_transparent(tmp_path):
    ops = list(mixed_ops(3, 5000))
    results = []
    for chi in (1, 4, 16):
        with open_store(tmp_path / str(chi), chi=chi) as s:
            apply(s, ops, {})
            results.append((s.items(), [s.get(b"key%05d" % i) for i in range(0, 2000, 3)]))
    assert results[0] == results[1] == results[2]


def test_retune_mid_stream(tmp_path):
    oracle = {}
    with open_store(tmp_path, chi=8) as s:
        ops = list(mixed_ops(4, 6000))
        apply(s, ops[:3000], oracle)
        assert s.set_checkpoint_distance(1) == 1 and s.chi == 1
        apply(s, ops[3000:], oracle)
        assert s.items() == sorted(oracle.items())
        with pytest.raises(InvalidParameter):
            s.set_checkpoint_distance(0)
        with pytest.raises(InvalidParameter):
            s.set_checkpoint_distance(True)


def test_invalid_arguments(tmp_path):
    with open_store(tmp_path) as s:
        with pytest.raises(InvalidArgument):
            s.put(b"", b"v")
        with pytest.raises(InvalidArgument):
            s.put(b"k" * 17, b"v")
        with pytest.raises(InvalidArgument):
            s.put(b"k", b"v" * 65)
        with pytest.raises(InvalidArgument):
            s.put("text", b"v")
        with pytest.raises(InvalidArgument):
            s.put(b"k", None)
        with pytest.raises(InvalidArgument):
            s.scan(b"", -1)
        with pytest.raises(InvalidArgument):
            s.scan("a", 1)
        with pytest.raises(InvalidArgument):
            s.get(b"")


def test_closed_store_rejects_calls(tmp_path):
    s = open_store(tmp_path)
    s.close()
    with pytest.raises(ContractViolation):
        s.put(b"k", b"v")
    s.close()  # idempotent


def test_structural_config_mismatch_is_open_failure(tmp_path):
    open_store(tmp_path).close()
    with pytest.raises(OpenFailure):
        KVStore.open(str(tmp_path), small_config(pivot_capacity=16))
    with KVStore.open(str(tmp_path), small_config(memory_budget_bytes=2 << 20), chi=2) as s:
        assert s.chi == 2


def test_missing_store_without_create(tmp_path):
    with pytest.raises(OpenFailure):
        KVStore.open(str(tmp_path / "none"), create=False)


def test_checkpoint_trims_wal_and_stats_are_sane(tmp_path):
    oracle = {}
    with open_store(tmp_path, chi=1) as s:
        apply(s, mixed_ops(6, 4000), oracle)
        s.flush()
        assert s.wal.base_seq == s.last_seq
        st = s.stats()
        assert st["write_amplification"] > 1.0
        assert st["logical_bytes"] == sum(len(k) + len(v) for k, v in oracle.items())
        assert st["space_amplification"] >= 1.0
        assert st["peak_memory_bytes"] >= st["memory_bytes"] > 0
    assert os.path.exists(tmp_path / "CONFIG")
