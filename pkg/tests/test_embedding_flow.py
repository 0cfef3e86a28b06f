import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import balanced, random_trees
from ontodg.embedding_flow import (
    BACKBONE,
    HASHED,
    EmbeddingTable,
    cosine_sim,
    hashed_vector,
    init_leaf_embeddings,
    lca_rectify,
    node_embeddings,
    read_embeddings,
    upward_average,
    write_embeddings,
)
from ontodg.ontology import build_hierarchy


def _coded(H=3, b=2):
    """Balanced tree whose leaf ``L<i>`` carries code ``c<i>``."""
    from conftest import balanced_edges

    edges = balanced_edges(H, b)
    leaves = [c for _, c in edges if c.startswith("L")]
    return build_hierarchy(edges, [(f"c{x[1:]}", x) for x in leaves])


def _leaf_table(h, vectors):
    t = np.full((len(h), len(vectors[0])), np.nan)
    for leaf, v in zip(h.leaves, vectors):
        t[leaf] = v
    return EmbeddingTable(t)


def test_cosine_examples(caplog):
    assert cosine_sim((1, 0), (1, 0)) == 1.0
    assert cosine_sim((1, 0), (0, 1)) == 0.0
    assert cosine_sim((1, 1), (1, 0)) == pytest.approx(0.7071067811865475, abs=1e-15)
    with caplog.at_level(logging.WARNING):
        assert cosine_sim((0, 0), (1, 0)) == 0.0
    assert "zero vector" in caplog.text


def test_init_copies_backbone():
    h = _coded()
    rng = np.random.default_rng(0)
    table = {f"c{i}": rng.normal(size=5) for i in range(4)}
    t = init_leaf_embeddings(h, table, 5)
    for leaf in h.leaves:
        assert np.array_equal(t[leaf], table["c" + h.names[leaf][1:]])
        assert t.provenance[leaf] == BACKBONE
    assert np.isnan(t[h.root]).all()


def test_init_hashed_fallback_is_deterministic():
    h = _coded()
    a = init_leaf_embeddings(h, {}, 8)
    b = init_leaf_embeddings(h, {}, 8)
    assert np.array_equal(a.vectors[h.leaves], b.vectors[h.leaves])
    assert set(a.provenance.values()) == {HASHED}
    bound = 1 / np.sqrt(8)
    assert np.all(np.abs(a.vectors[h.leaves]) <= bound)
    assert not np.array_equal(hashed_vector("L0", 8), hashed_vector("L1", 8))


def test_init_mixed_provenance():
    h = _coded()
    table = {"c0": np.ones(3), "c2": np.zeros(3)}
    t = init_leaf_embeddings(h, table, 3)
    prov = {h.names[n]: p for n, p in t.provenance.items()}
    assert prov == {"L0": BACKBONE, "L1": HASHED, "L2": BACKBONE, "L3": HASHED}
    with pytest.raises(ValueError):
        init_leaf_embeddings(h, {"c0": np.ones(4)}, 3)


def test_upward_average_examples():
    h = build_hierarchy([("root", "a"), ("root", "b")])
    t = upward_average(h, _leaf_table(h, [(1.0, 0.0), (0.0, 1.0)]))
    assert t[h.root].tolist() == [0.5, 0.5]
    h = balanced(4, 3)
    v = np.array([0.3, -1.2, 2.0])
    t = upward_average(h, _leaf_table(h, [v] * h.n_leaves))
    assert np.allclose(t.vectors, v)


def test_upward_average_root_matches_brute_force():
    h = balanced(3, 2)
    basis = np.eye(4)
    t = upward_average(h, _leaf_table(h, basis))
    brute = np.mean([t[x] for x in h.leaf_descendants(h.root)], axis=0)
    assert np.allclose(t[h.root], brute, atol=1e-15)
    assert np.allclose(t[h.root], 0.25)
    alt = upward_average(h, _leaf_table(h, basis), mode="leaves")
    assert np.allclose(alt.vectors, t.vectors)
    with pytest.raises(ValueError):
        upward_average(h, _leaf_table(h, basis), mode="grandchildren")


@settings(max_examples=40, deadline=None)
@given(random_trees(), st.integers(0, 2**32 - 1))
def test_upward_average_convex_hull(h, seed):
    vecs = np.random.default_rng(seed).normal(size=(h.n_leaves, 4))
    t = upward_average(h, _leaf_table(h, vecs))
    for n in range(len(h)):
        ch = h.children[n]
        if ch:
            assert np.all(t[n] >= t.vectors[ch].min(axis=0) - 1e-12)
            assert np.all(t[n] <= t.vectors[ch].max(axis=0) + 1e-12)


def test_rectify_threshold_one_is_identity():
    h = balanced(3, 2)
    t = upward_average(h, _leaf_table(h, [(1, 0), (1, 0), (0, 1), (0, 1)]))
    log = []
    out = lca_rectify(h, t, threshold=1.0, log=log)
    assert log == []
    assert np.array_equal(out.vectors, t.vectors)


def test_rectify_identical_pair():
    h = build_hierarchy([("root", "P"), ("root", "Q"), ("P", "a"), ("P", "b"), ("Q", "c"), ("Q", "d")])
    v = np.array([1.0, 0.0, 0.0])
    vecs = np.array([v, v, (0, 1.0, 0), (0, 0, 1.0)])
    t = upward_average(h, _leaf_table(h, vecs))
    u = np.array([0.2, 0.7, -0.1])
    t.vectors[h.index["P"]] = u
    log = []
    out = lca_rectify(h, t, threshold=0.99, log=log)
    assert len(log) == 1 and (log[0].a, log[0].b) == (h.index["a"], h.index["b"])
    assert np.allclose(out[h.index["P"]], (u + 2 * v) / 3)
    assert np.array_equal(out[h.index["Q"]], t[h.index["Q"]])


def replay(h, table, threshold):
    """Naive restatement of the greedy merge: recompute every active pair each round."""
    vec = table.vectors.copy()
    active = list(h.leaves)
    merges = []
    while len(active) > 1:
        best, pair = None, None
        for i in range(len(active)):
            for j in range(i + 1, len(active)):
                a, b = sorted((active[i], active[j]))
                s = cosine_sim(vec[a], vec[b])
                if best is None or s > best or (s == best and (a, b) < pair):
                    best, pair = s, (a, b)
        if not best > threshold:
            break
        a, b = pair
        anc = h.lca(a, b)
        vec[anc] = (vec[anc] + vec[a] + vec[b]) / 3.0
        merges.append((a, b, anc))
        active = [n for n in active if n not in (a, b)]
        if anc not in active:
            active.append(anc)
    return vec, merges


def test_rectify_matches_replay_oracle_fixed():
    h = balanced(3, 2)
    vecs = np.array([[1.0, 0.1], [0.9, 0.3], [0.2, 1.0], [-0.1, 0.8]])
    t = upward_average(h, _leaf_table(h, vecs))
    log = []
    out = lca_rectify(h, t, threshold=0.5, log=log)
    expected, merges = replay(h, t, 0.5)
    assert [(m.a, m.b, m.lca) for m in log] == merges
    assert np.allclose(out.vectors, expected, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(random_trees(H_range=(3, 4), b_range=(2, 3)), st.integers(0, 2**32 - 1), st.floats(-0.5, 0.95))
def test_rectify_matches_replay_oracle_random(h, seed, threshold):
    vecs = np.random.default_rng(seed).normal(size=(h.n_leaves, 3))
    t = upward_average(h, _leaf_table(h, vecs))
    log = []
    out = lca_rectify(h, t, threshold=threshold, log=log)
    expected, merges = replay(h, t, threshold)
    assert [(m.a, m.b, m.lca) for m in log] == merges
    assert np.allclose(out.vectors, expected, atol=1e-10)
    assert len(log) <= h.n_leaves - 1
    assert all(np.isfinite(out.vectors).all(axis=1))


def test_rectify_deterministic_with_ties():
    h = balanced(3, 2)
    t = upward_average(h, _leaf_table(h, np.ones((4, 2))))
    l1, l2 = [], []
    a = lca_rectify(h, t, 0.5, l1)
    b = lca_rectify(h, t, 0.5, l2)
    assert np.array_equal(a.vectors, b.vectors)
    assert (l1[0].a, l1[0].b) == (h.leaves[0], h.leaves[1])
    assert l1 == l2


def test_binary_dump_round_trip(tmp_path):
    h = _coded()
    t = node_embeddings(h, {}, 6)
    p = tmp_path / "e.bin"
    write_embeddings(p, t)
    raw = p.read_bytes()
    assert int.from_bytes(raw[:4], "little") == len(h)
    assert int.from_bytes(raw[4:8], "little") == 6
    assert len(raw) == 8 + 4 * 6 * len(h)
    back = read_embeddings(p)
    assert np.allclose(back.vectors, t.vectors, atol=1e-6)
