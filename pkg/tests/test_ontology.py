import pytest
from hypothesis import given, settings

from conftest import balanced, random_trees
from ontodg.ontology import (
    CycleError,
    HierarchyError,
    HierarchyParseError,
    LevelError,
    MultiRootError,
    build_hierarchy,
    load_hierarchy,
    parse_hierarchy,
)


def test_ragged_leaf_rejected():
    with pytest.raises(LevelError):
        parse_hierarchy("root>A\nroot>B\nA>a1\n")


def test_ragged_leaf_padded_on_request():
    h = parse_hierarchy("root>A\nroot>B\nA>a1\n", pad_ragged=True)
    assert h.H == 3
    assert all(h.level[leaf] == 3 for leaf in h.leaves)
    assert {h.names[x] for x in h.leaves} == {"a1", "B"}


def test_balanced_file(tmp_path):
    p = tmp_path / "h.txt"
    p.write_text("root>A\nroot>B\nA>a1\nA>a2\nB>b1\nB>b2\n")
    h = load_hierarchy(p)
    assert h.H == 3
    assert len(h) == 7
    assert h.n_leaves == 4


def test_cycle_rejected():
    with pytest.raises(CycleError):
        parse_hierarchy("root>A\nA>a1\na1>root\n")


def test_multi_root_and_multi_parent():
    with pytest.raises(MultiRootError):
        parse_hierarchy("r1>a\nr2>b\n")
    with pytest.raises(HierarchyError):
        parse_hierarchy("root>A\nroot>B\nA>x\nB>x\n")


def test_parse_error_has_line_number():
    with pytest.raises(HierarchyParseError) as e:
        parse_hierarchy("root>A\n\nthis line is wrong\n")
    assert e.value.lineno == 3


def test_code_lines_and_unknown_code():
    h = parse_hierarchy("root>A\nroot>B\n#code 401.9 A\n#code 428.0 B\n")
    assert h.leaf_of("401.9") == h.index["A"]
    with pytest.raises(KeyError):
        h.leaf_of("999")
    with pytest.raises(HierarchyError):
        parse_hierarchy("root>A\nA>a\n#code X A\n")  # code on an internal node


def test_descendants_examples(tree7):
    h = tree7
    assert h.descendants(h.root) == frozenset(range(len(h))) - {h.root}
    for leaf in h.leaves:
        assert h.descendants(leaf) == frozenset()
        assert h.leaf_descendants(leaf) == frozenset({leaf})
    mid = h.index["n2_0"]
    assert h.descendants(mid) == {h.index["L0"], h.index["L1"]}
    assert h.leaf_descendants(h.root) == frozenset(h.leaves)
    assert h.leaf_descendants(mid) == {h.index["L0"], h.index["L1"]}


def test_lca_examples(tree7):
    h = tree7
    a, b, c = h.index["L0"], h.index["L1"], h.index["L2"]
    assert h.lca(a, b) == h.index["n2_0"]
    assert h.lca(a, a) == a
    assert h.lca(a, c) == h.root


def test_unknown_node_id(tree7):
    with pytest.raises(KeyError):
        tree7.descendants(99)
    with pytest.raises(KeyError):
        tree7.lca(0, -1)


@settings(max_examples=60, deadline=None)
@given(random_trees())
def test_structural_invariants(h):
    roots = [n for n in range(len(h)) if h.parent[n] == -1]
    assert roots == [h.root] and h.level[h.root] == 1
    for n in range(len(h)):
        if h.parent[n] != -1:
            assert h.level[n] == h.level[h.parent[n]] + 1
        if h.is_leaf(n):
            assert h.level[n] == h.H
        else:
            assert len(h.leaf_descendants(n)) == sum(len(h.leaf_descendants(c)) for c in h.children[n])


@settings(max_examples=60, deadline=None)
@given(random_trees())
def test_lca_properties(h):
    nodes = list(range(len(h)))
    for a in nodes[:: max(1, len(nodes) // 7)]:
        for b in nodes[:: max(1, len(nodes) // 5)]:
            m = h.lca(a, b)
            assert m == h.lca(b, a)
            assert h.lca(m, m) == m
            assert h.level[m] <= min(h.level[a], h.level[b])
            assert h.is_ancestor_or_self(m, a) and h.is_ancestor_or_self(m, b)
            # deepest: no child of m is an ancestor of both
            assert not any(h.is_ancestor_or_self(c, a) and h.is_ancestor_or_self(c, b) for c in h.children[m])


@settings(max_examples=40, deadline=None)
@given(random_trees())
def test_round_trip(h):
    again = parse_hierarchy(h.dumps())
    assert again == h
    assert again.names == h.names
    assert parse_hierarchy(again.dumps()) == again


def test_round_trip_keeps_codes(tmp_path):
    h = build_hierarchy([("root", "A"), ("root", "B")], codes=[("c1", "A"), ("c2", "B"), ("c3", "B")])
    p = tmp_path / "h.txt"
    h.save(p)
    again = load_hierarchy(p)
    assert again.leaf_map == h.leaf_map


def test_node_ids_follow_file_order():
    h = parse_hierarchy("root>z\nroot>a\n")
    assert h.names == ["root", "z", "a"]
    assert balanced(3, 2).names[0] == "root"
