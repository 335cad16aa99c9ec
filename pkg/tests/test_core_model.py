import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from turtlekv.errors import ContractViolation, EmptyBatch, InvalidParameter
from turtlekv.model import (
    ENTRY_OVERHEAD,
    Config,
    Run,
    StatsCounters,
    Update,
    entry_size,
    make_batch,
    merge_runs,
)

keys = st.binary(min_size=1, max_size=6)
values = st.one_of(st.none(), st.binary(max_size=10))


def test_entry_size_counts_overhead_key_and_value():
    assert entry_size(b"abc", b"xy") == ENTRY_OVERHEAD + 5
    assert entry_size(b"abc", None) == ENTRY_OVERHEAD + 3


def test_make_batch_newest_seq_wins_and_sorts():
    b = make_batch([Update(b"b", b"1", 1), Update(b"a", b"2", 2), Update(b"b", b"3", 3)])
    assert b.pairs() == [(b"a", b"2"), (b"b", b"3")]


def test_make_batch_keeps_tombstone_with_its_own_seq():
    b = make_batch([Update(b"k", b"v", 4), Update(b"k", None, 9)])
    assert b.pairs() == [(b"k", None)]
    assert b.cells[0][1] == 9


def test_make_batch_rejects_empty_and_duplicate_seqs():
    with pytest.raises(EmptyBatch):
        make_batch([])
    with pytest.raises(ContractViolation):
        make_batch([Update(b"a", b"1", 5), Update(b"b", b"1", 5)])


@given(st.lists(st.tuples(keys, values), min_size=1, max_size=80))
def test_make_batch_matches_flat_map(items):
    ups = [Update(k, v, i + 1) for i, (k, v) in enumerate(items)]
    oracle = {}
    for u in ups:
        oracle[u.key] = u.value
    b = make_batch(ups)
    assert b.pairs() == sorted(oracle.items())
    b.check_sorted()


@given(st.lists(st.dictionaries(keys, values, max_size=20), min_size=1, max_size=5))
def test_merge_runs_newest_first_matches_layered_map(layers):
    runs = [Run.from_pairs(sorted(d.items())) for d in layers]
    oracle = {}
    for d in reversed(layers):  # oldest applied first
        oracle.update(d)
    merged = merge_runs(runs)
    assert merged.pairs() == sorted(oracle.items())
    dropped = merge_runs(runs, drop_tombstones=True)
    assert dropped.pairs() == sorted((k, v) for k, v in oracle.items() if v is not None)


def test_merge_runs_breaks_rank_ties_by_seq():
    older = Run([b"k"], [(b"old", 1, 21)])
    newer = Run([b"k"], [(b"new", 7, 21)])
    assert merge_runs([older, newer], ranks=[0, 0]).pairs() == [(b"k", b"new")]


def test_merge_runs_rejects_unsorted_input():
    with pytest.raises(ContractViolation):
        merge_runs([Run([b"b", b"a"], [(b"", 1, 20), (b"", 2, 20)])])


@given(st.dictionaries(keys, st.binary(max_size=30), min_size=1, max_size=60),
       st.integers(min_value=1, max_value=8))
def test_split_by_bytes_partitions_in_order(d, parts):
    run = Run.from_pairs(sorted(d.items()))
    pieces = run.split_by_bytes(parts)
    assert 1 <= len(pieces) <= parts
    assert sum((p.keys for p in pieces), []) == run.keys
    assert all(p.keys for p in pieces)
    assert sum(p.nbytes for p in pieces) == run.nbytes


def test_run_cum_and_bytes_between():
    run = Run.from_pairs([(b"a", b"xx"), (b"b", None), (b"c", b"")])
    assert run.cum == [0, 22, 42, 62]
    assert run.bytes_between(1, 3) == 40
    assert run.lookup(b"b") == (None, 0, 20)
    assert run.lookup(b"z") is None


def test_config_level_caps_sum_to_segment_budget():
    assert Config(pivot_capacity=16).level_caps == [1, 2, 4, 8]
    assert Config(pivot_capacity=8).level_caps == [1, 2, 4]
    caps = Config(pivot_capacity=5).level_caps
    assert caps == [1, 2, 1] and sum(caps) == 4


@pytest.mark.parametrize("rho", [4, 5, 8, 16, 32])
def test_config_levels_is_ceil_log2_rho(rho):
    c = Config(pivot_capacity=rho, node_page_bytes=16384)
    assert c.levels == math.ceil(math.log2(rho))
    assert sum(c.level_caps) == rho - 1


def test_config_defaults_and_derived_sizes():
    c = Config()
    assert c.leaf_capacity == 3 * c.leaf_page_bytes // 4
    assert c.batch_bytes == c.leaf_capacity
    # 10 bits/key beats the ~9.6 needed for a 1% false-positive rate
    assert c.filter_bits == 10.0
    assert Config(filter_fp_rate=0.001).filter_bits == pytest.approx(14.38, abs=0.01)


@pytest.mark.parametrize(
    "kw",
    [
        dict(pivot_capacity=3),
        dict(level_fanout=3),
        dict(chi=0),
        dict(filter_fp_rate=0.0),
        dict(leaf_page_bytes=1000),
        dict(max_key_bytes=0),
        dict(max_value_bytes=60000),
        dict(pivot_capacity=64),  # node page too small for 64 maximal pivots
    ],
)
def test_config_rejects_invalid(kw):
    with pytest.raises(InvalidParameter):
        Config(**kw)


def test_config_dict_round_trip():
    c = Config(pivot_capacity=8, chi=4)
    assert Config.from_dict(c.to_dict()) == c


def test_stats_write_amp_undefined_at_zero():
    s = StatsCounters()
    snap = s.snapshot()
    assert snap["write_amplification"] == 0.0
    assert snap["write_amplification_defined"] is False
    s.record_user(100)
    s.record_write("leaf", 300)
    s.record_write("wal", 100)
    snap = s.snapshot()
    assert snap["write_amplification"] == 4.0
    assert snap["pages_written"] == {"leaf": 1, "wal": 1}
