import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import K, SeqBatches, ints, tiny_config
from turtlekv.errors import BufferFull, ContractViolation
from turtlekv.model import Config, Run
from turtlekv.tree import ABSENT, DELETED, FOUND, LeafPage, NodePage, TurtleTree, check_tree

WORKED_BATCHES = ([1, 7, 10], [0, 4, 5], [2, 8, 11], [3, 6, 9])


def levels_of(tree, node):
    return [[ints(tree.segment_run(s.page).keys) for s in level] for level in node.levels]


def worked_tree(pivots=(0, 2, 6, 9)):
    tree = TurtleTree(tiny_config())
    piv = [b"", *(K(p) for p in pivots[1:])]
    root = tree.new_node(piv, [LeafPage(Run()) for _ in piv])
    tree.root, tree.height = root, 2
    return tree, root


def kv(keys):
    return [(K(k), bytes([k])) for k in keys]


class TestWorkedExample:
    def test_segment_states_after_each_batch(self):
        tree, root = worked_tree()
        b = SeqBatches()
        expected = [
            [[[1, 7, 10]], [], []],  # a
            [[], [[0, 1, 4], [5, 7, 10]], []],  # b, c
            [[[2, 8, 11]], [[0, 1, 4], [5, 7, 10]], []],  # d joins b, c
            [[], [], [[0, 1, 2], [3, 4, 5], [6, 7, 8], [9, 10, 11]]],  # e f g h
        ]
        for keys, want in zip(WORKED_BATCHES, expected):
            tree.buffer_insert(root, b(kv(keys)))
            assert levels_of(tree, root) == want

    def test_third_batch_leaves_level_two_pages_untouched(self):
        tree, root = worked_tree()
        b = SeqBatches()
        tree.buffer_insert(root, b(kv(WORKED_BATCHES[0])))
        tree.buffer_insert(root, b(kv(WORKED_BATCHES[1])))
        pages = [s.page for s in root.levels[1]]
        tree.buffer_insert(root, b(kv(WORKED_BATCHES[2])))
        assert [s.page for s in root.levels[1]] == pages

    def test_flush_after_third_batch_merges_three_segments(self):
        tree, root = worked_tree()
        b = SeqBatches()
        for keys in WORKED_BATCHES[:3]:
            tree.buffer_insert(root, b(kv(keys)))
        pages = [s.page for s in root.segments()]
        runs = [list(p.run.keys) for p in pages]
        out = tree.extract_flush_batch(root, 1)  # pivot range [2, 6)
        assert ints(out.keys) == [2, 4, 5]
        # segment pages are not rewritten; only node metadata moves
        assert [s.page for s in root.segments()] == pages
        assert [list(p.run.keys) for p in pages] == runs
        assert root.pending[1] == 0
        for seg in root.segments():
            assert not (seg.active >> 1) & 1
        check_tree(tree)

    def test_pending_bytes_track_pivot_ranges(self):
        tree, root = worked_tree()
        b = SeqBatches()
        for keys in WORKED_BATCHES:
            tree.buffer_insert(root, b(kv(keys)))
        # pivots [0,2) [2,6) [6,9) [9,inf) hold 2, 4, 3, 3 keys of 28 bytes
        assert root.pending == [56, 112, 84, 84]


def test_buffer_full_raised_before_any_change():
    tree, root = worked_tree(pivots=(0, 100))
    b = SeqBatches()
    keys = iter(range(0, 200, 2))
    for _ in range(7):
        tree.buffer_insert(root, b(kv([next(keys) for _ in range(3)])))
    before = levels_of(tree, root), list(root.pending)
    with pytest.raises(BufferFull):
        tree.buffer_insert(root, b(kv([next(keys) for _ in range(3)])))
    assert (levels_of(tree, root), root.pending) == before


def test_select_flush_pivot_prefers_heaviest_then_lowest():
    tree, root = worked_tree()
    root.pending = [10, 90, 90, 5]
    assert tree.select_flush_pivot(root) == 1
    root.pending = [10, 20, 30, 5]
    assert tree.select_flush_pivot(root) is None


def test_extract_flush_batch_respects_limit_and_resumes():
    tree, root = worked_tree(pivots=(0, 100))
    b = SeqBatches()
    tree.buffer_insert(root, b(kv([1, 3, 5])))
    tree.buffer_insert(root, b(kv([2, 4, 6])))
    first = tree.extract_flush_batch(root, 0, limit=56)
    second = tree.extract_flush_batch(root, 0)  # default limit: L = three entries
    third = tree.extract_flush_batch(root, 0)
    assert ints(first.keys) == [1, 2]
    assert ints(second.keys) == [3, 4, 5]
    assert ints(third.keys) == [6]
    assert root.pending == [0, 0] and not list(root.segments())


def test_flush_batch_resolves_newest_value():
    tree, root = worked_tree(pivots=(0, 100))
    b = SeqBatches()
    tree.buffer_insert(root, b([(K(1), b"old"), (K(2), b"x")]))
    tree.buffer_insert(root, b([(K(1), None)]))
    out = tree.extract_flush_batch(root, 0)
    assert out.pairs() == [(K(1), None), (K(2), b"x")]


def test_leaf_merge_drops_tombstones_and_splits():
    tree = TurtleTree(tiny_config())
    leaf = LeafPage(Run.from_pairs(kv([1, 2, 3])))
    b = SeqBatches()
    out = tree.leaf_merge(leaf, b([(K(2), None), (K(4), b"d"), (K(5), b"e"), (K(6), b"f")]))
    assert sum((ints(lf.run.keys) for lf in out), []) == [1, 3, 4, 5, 6]
    assert len(out) == 2  # 140 bytes need two leaves of at most 84
    assert all(lf.run.nbytes <= tree.L for lf in out)


def build(tree_config, ops, seed=0):
    tree = TurtleTree(tree_config)
    b = SeqBatches()
    oracle = {}
    for batch in ops:
        run = b(batch)
        tree.batch_update(run)
        for k, v in run.pairs():
            if v is None:
                oracle.pop(k, None)
            else:
                oracle[k] = v
        check_tree(tree)
        assert dict(tree.iter_from(b"")) == oracle
    return tree, oracle


def random_ops(seed, nbatches, keyspace, del_frac, max_batch=40):
    rnd = random.Random(seed)
    out = []
    for _ in range(nbatches):
        out.append([
            (K(rnd.randrange(keyspace)), None if rnd.random() < del_frac else bytes([rnd.randrange(256)]))
            for _ in range(rnd.randint(1, max_batch))
        ])
    return out


@pytest.mark.parametrize("rho", [4, 5, 8, 16])
def test_random_batches_keep_invariants_and_contents(rho):
    cfg = tiny_config(pivot_capacity=rho, leaf_capacity_bytes=140)
    tree, oracle = build(cfg, random_ops(rho, 120, 2000, 0.2))
    for k in [K(i) for i in range(0, 2000, 7)]:
        got = tree.point_query(k)
        if k in oracle:
            assert got.status == FOUND and got.value == oracle[k]
        else:
            assert got.status in (ABSENT, DELETED)
    assert tree.height >= 3


def test_growing_then_deleting_everything_empties_the_tree():
    cfg = tiny_config(pivot_capacity=4, leaf_capacity_bytes=112)
    keys = list(range(600))
    grow = [[(K(k), b"v") for k in keys[i:i + 30]] for i in range(0, 600, 30)]
    rnd = random.Random(3)
    rnd.shuffle(keys)
    shrink = [[(K(k), None) for k in keys[i:i + 25]] for i in range(0, 600, 25)]
    tree, oracle = build(cfg, grow + shrink)
    assert oracle == {}
    assert tree.root is None or not list(tree.iter_from(b""))


@given(st.lists(
    st.lists(st.tuples(st.integers(0, 300), st.one_of(st.none(), st.binary(min_size=1, max_size=4))),
             min_size=1, max_size=30),
    min_size=1, max_size=25))
def test_property_tree_matches_oracle(batches):
    cfg = tiny_config(pivot_capacity=4, leaf_capacity_bytes=112, max_value_bytes=8)
    tree, oracle = build(cfg, [[(K(k), v) for k, v in batch] for batch in batches])
    for k in range(0, 300, 11):
        got = tree.get(K(k))
        assert got == oracle.get(K(k))


def test_range_scan_limits_and_start():
    cfg = tiny_config(pivot_capacity=4, leaf_capacity_bytes=112)
    tree, oracle = build(cfg, random_ops(9, 60, 500, 0.1))
    expect = sorted(oracle.items())
    assert tree.range_scan(b"", len(expect)) == expect
    start = K(250)
    tail = [(k, v) for k, v in expect if k >= start]
    assert tree.range_scan(start, 5) == tail[:5]
    assert tree.range_scan(start, 0) == []
    with pytest.raises(ContractViolation):
        tree.range_scan(start, -1)


def test_split_then_join_restores_contents():
    cfg = tiny_config(pivot_capacity=8, leaf_capacity_bytes=140)
    tree, oracle = build(cfg, random_ops(5, 80, 1000, 0.0))
    root = tree.root_object()
    assert isinstance(root, NodePage)
    n = len(root.pivots)
    left, right, sep = tree.split_node(root)
    assert len(left.pivots) + len(right.pivots) == n
    assert left.upper == sep == right.pivots[0]
    joined = tree.join_nodes(left, right)
    assert joined.pivots == root.pivots and joined.upper is None
    tree.root = joined
    check_tree(tree)
    assert dict(tree.iter_from(b"")) == oracle


def test_join_rejects_overlapping_or_oversized():
    tree, root = worked_tree()
    with pytest.raises(ContractViolation):
        tree.join_nodes(root, root)
    big = TurtleTree(Config(pivot_capacity=4, leaf_page_bytes=16384, max_key_bytes=16, max_value_bytes=64))
    a = big.new_node([b"", b"b", b"c"], [LeafPage(Run())] * 3)
    c = big.new_node([b"d", b"e", b"f"], [LeafPage(Run())] * 3)
    with pytest.raises(ContractViolation):
        big.join_nodes(a, c)
