import pytest
from hypothesis import given
from hypothesis import strategies as st

from turtlekv.errors import ContractViolation
from turtlekv.memtable import DELETED, FALLTHROUGH, FOUND, DeltasStack, MemTable, lookup, merged_items
from turtlekv.model import ENTRY_OVERHEAD, Update


def table(*updates):
    t = MemTable()
    for u in updates:
        t.insert(Update(*u))
    return t


def test_newer_seq_replaces_older_and_stale_is_ignored():
    t = table((b"a", b"1", 1), (b"a", b"22", 3))
    assert t.lookup(b"a") == (b"22", 3)
    assert not t.insert(Update(b"a", b"old", 2))
    assert t.nbytes == ENTRY_OVERHEAD + 1 + 2
    assert (t.min_seq, t.max_seq) == (1, 3)


def test_finalize_freezes_and_sorts():
    t = table((b"b", b"2", 1), (b"a", None, 2))
    run = t.finalize()
    assert run.pairs() == [(b"a", None), (b"b", b"2")]
    with pytest.raises(ContractViolation):
        t.insert(Update(b"c", b"3", 3))
    with pytest.raises(ContractViolation):
        t.finalize()


def test_empty_finalize_needs_force():
    with pytest.raises(ContractViolation):
        MemTable().finalize()
    assert len(MemTable().finalize(force=True)) == 0


def test_stack_accepts_only_finalized_and_prunes_by_seq():
    s = DeltasStack()
    with pytest.raises(ContractViolation):
        s.push(table((b"a", b"1", 1)))
    old, new = table((b"a", b"1", 1), (b"b", b"1", 2)), table((b"a", b"2", 5))
    old.finalize()
    new.finalize()
    s.push(old)
    s.push(new)
    assert s.tables == (new, old)
    assert s.prune(2) == 1 and s.tables == (new,)
    assert s.prune() == 1 and len(s) == 0


def test_lookup_order_active_then_newest_delta():
    older = table((b"k", b"v1", 1), (b"gone", b"x", 2))
    older.finalize()
    newer = table((b"gone", None, 3))
    newer.finalize()
    s = DeltasStack()
    s.push(older)
    s.push(newer)
    active = table((b"k", b"v2", 4))
    assert lookup(active, s, b"k") == (FOUND, b"v2")
    assert lookup(None, s, b"k") == (FOUND, b"v1")
    assert lookup(active, s, b"gone") == (DELETED, None)
    assert lookup(active, s, b"zzz") == (FALLTHROUGH, None)


ops = st.lists(st.tuples(st.integers(0, 30), st.one_of(st.none(), st.binary(max_size=3))), max_size=60)


@given(st.lists(ops, min_size=1, max_size=5), st.integers(0, 30))
def test_merged_items_matches_layered_dict(layers, start):
    seq = 0
    tables = []
    oracle = {}
    for layer in layers:  # oldest first
        t = MemTable()
        for k, v in layer:
            seq += 1
            key = bytes([k])
            t.insert(Update(key, v, seq))
            oracle[key] = v
        tables.append(t)
    got = list(merged_items(list(reversed(tables)), bytes([start])))
    assert got == sorted(((k, v) for k, v in oracle.items() if k >= bytes([start])), key=lambda kv: kv[0])
