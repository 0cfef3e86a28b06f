import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import silhouette_score

from conftest import balanced, random_trees
from oracles import exhaustive_best, vocab_silhouette
from oracles import silhouette as silhouette_oracle
from ontodg.embedding_flow import EmbeddingTable, upward_average
from ontodg.ontology import build_hierarchy
from ontodg.pruning import (
    CoverageError,
    FlaggedPair,
    PrunedVocabulary,
    ScoreParams,
    SilhouetteUndefined,
    assign_domains,
    beam_refine,
    candidate_init,
    cohort_ids,
    node_indicators,
    node_score,
    prune,
    silhouette,
)
from ontodg.records import aggregate_history, make_record


def _table(h, leaf_vecs):
    t = np.full((len(h), len(leaf_vecs[0])), np.nan)
    t[h.leaves] = leaf_vecs
    return upward_average(h, EmbeddingTable(t))


# ---- node score -------------------------------------------------------------


def test_score_alpha_one_leaf_is_e():
    h = balanced(3, 2)
    t = _table(h, np.random.default_rng(0).normal(size=(4, 3)))
    for leaf in h.leaves:
        assert node_score(h, t, leaf, ScoreParams(alpha=1.0)) == pytest.approx(math.e, abs=1e-12)


def test_score_alpha_zero_root_is_third():
    h = balanced(3, 2)
    t = _table(h, np.random.default_rng(0).normal(size=(4, 3)))
    assert node_score(h, t, h.root, ScoreParams(alpha=0.0)) == pytest.approx(1 / 3, abs=1e-15)


def test_score_formula_oracle():
    h = balanced(3, 2)
    vecs = np.array([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0], [-1.0, 0.5]])
    t = _table(h, vecs)
    mid = h.index["n2_0"]
    e = (vecs[0] + vecs[1]) / 2  # (0.8, 0.4)
    cos = [float(e @ v / (np.linalg.norm(e) * np.linalg.norm(v))) for v in vecs[:2]]
    pur = sum(cos) / 2
    expected = 0.5 * math.exp(pur) + 0.5 * (2 / 4) * (2 / 3)
    assert node_score(h, t, mid, ScoreParams(0.5)) == pytest.approx(expected, abs=1e-12)
    # purity over all descendants at the root includes the two internal nodes
    allp = node_indicators(h, t, h.root, ScoreParams(0.5, "all"))[0]
    leafp = node_indicators(h, t, h.root, ScoreParams(0.5, "leaves"))[0]
    r = t[h.root]
    cs = lambda v: float(r @ v / (np.linalg.norm(r) * np.linalg.norm(v)))  # noqa: E731
    assert leafp == pytest.approx(np.mean([cs(v) for v in vecs]), abs=1e-12)
    assert allp == pytest.approx(np.mean([cs(t[n]) for n in h.descendants(h.root)]), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1))
def test_score_monotone_in_alpha_for_pure_nodes(seed, a1, a2):
    h = balanced(3, 2)
    v = np.random.default_rng(seed).normal(size=3)
    t = _table(h, np.tile(v, (4, 1)))
    lo, hi = sorted((a1, a2))
    for n in range(len(h)):
        assert node_indicators(h, t, n)[0] == pytest.approx(1.0, abs=1e-12)
        assert node_score(h, t, n, ScoreParams(hi)) >= node_score(h, t, n, ScoreParams(lo)) - 1e-12


def test_score_params_validation():
    with pytest.raises(ValueError):
        ScoreParams(alpha=1.5)
    with pytest.raises(ValueError):
        ScoreParams(purity_over="internal")


# ---- candidate init ---------------------------------------------------------


def _two_leaf():
    h = build_hierarchy([("root", "a"), ("root", "b")])
    return h, h.index["a"], h.index["b"]


@pytest.mark.parametrize(
    "parent_score, expect_parent, expect_flag",
    [(5.0, True, False), (0.0, False, False), (1.5, False, True)],
)
def test_candidate_init_cases(parent_score, expect_parent, expect_flag):
    h, a, b = _two_leaf()
    S = np.zeros(len(h))
    S[h.root], S[a], S[b] = parent_score, 1.0, 2.0
    c0, flagged = candidate_init(h, S)
    assert c0 == ([h.root] if expect_parent else [a, b])
    assert flagged == ([FlaggedPair(h.root, (a, b))] if expect_flag else [])


def test_candidate_init_order_bottom_up():
    h = balanced(3, 2)
    S = np.full(len(h), 1.5)
    S[h.leaves] = [1.0, 2.0, 1.0, 2.0]
    S[h.root] = 0.0
    _, flagged = candidate_init(h, S)
    assert [f.parent for f in flagged] == [h.index["n2_0"], h.index["n2_1"]]


# ---- silhouette -------------------------------------------------------------


def test_silhouette_far_clusters():
    X = {0: (0, 0), 1: (0, 0.01), 2: (10, 10), 3: (10, 10.01)}
    assert silhouette(X, {0: "A", 1: "A", 2: "B", 3: "B"}) > 0.99


def test_silhouette_identical_points():
    X = {i: (1.0, 1.0) for i in range(4)}
    assert silhouette(X, {0: 0, 1: 0, 2: 1, 3: 1}) == 0.0


def test_silhouette_hand_fixed():
    X = {0: (0.0, 0.0), 1: (1.0, 0.0), 2: (4.0, 3.0), 3: (0.0, 3.0)}
    lab = {0: 7, 1: 7, 2: 9, 3: 9}
    assert silhouette(X, lab) == pytest.approx(silhouette_oracle(list(X.values()), list(lab.values())), abs=1e-12)


def test_silhouette_needs_two_clusters():
    with pytest.raises(SilhouetteUndefined):
        silhouette({0: (0, 0), 1: (1, 1)}, {0: 1, 1: 1})


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 12), st.integers(2, 4))
def test_silhouette_matches_oracles(seed, n, k):
    g = np.random.default_rng(seed)
    X = g.normal(size=(n, 3))
    labels = [int(i % k) for i in range(n)]
    got = silhouette(dict(enumerate(X)), dict(enumerate(labels)))
    assert got == pytest.approx(silhouette_oracle(X.tolist(), labels), abs=1e-12)
    if len(set(labels)) < n:
        assert got == pytest.approx(silhouette_score(X, labels), abs=1e-12)


# ---- beam refinement --------------------------------------------------------


def test_beam_no_flags_returns_c0():
    h = balanced(3, 2)
    t = _table(h, np.eye(4))
    c0 = list(h.leaves)
    assert beam_refine(h, t, c0, []).nodes == tuple(c0)
    with pytest.raises(ValueError):
        beam_refine(h, t, c0, [], beam_width=0)


def test_beam_prefers_parent_when_it_helps():
    h = balanced(3, 2)
    vecs = np.array([[0.0, 0.0], [0.0, 0.1], [5.0, 0.0], [0.0, 5.0]])
    t = _table(h, vecs)
    c0 = list(h.leaves)
    p = h.index["n2_0"]
    out = beam_refine(h, t, c0, [FlaggedPair(p, tuple(h.children[p]))], beam_width=2)
    assert p in out.nodes
    assert vocab_silhouette(h, t, out.nodes) > vocab_silhouette(h, t, c0)


def _flagged_instance(seed, H=4, b=2):
    h = balanced(H, b)
    g = np.random.default_rng(seed)
    t = _table(h, g.normal(size=(h.n_leaves, 3)))
    c0, flagged = candidate_init(h, g.normal(size=len(h)))
    return h, t, c0, flagged


def test_beam_equals_exhaustive():
    checked = 0
    for seed in range(40):
        h, t, c0, flagged = _flagged_instance(seed)
        if len(c0) < 2:  # a root-only start has no defined silhouette
            continue
        checked += 1
        out = beam_refine(h, t, c0, flagged, beam_width=2 ** len(flagged))
        assert vocab_silhouette(h, t, out.nodes) == pytest.approx(exhaustive_best(h, t, c0, flagged), abs=1e-12)
    assert checked >= 12


def test_beam_three_flags_exhaustive():
    found = 0
    for seed in range(200):
        h, t, c0, flagged = _flagged_instance(seed, H=3, b=3)
        if len(flagged) != 3 or len(c0) < 2:
            continue
        found += 1
        out = beam_refine(h, t, c0, flagged, beam_width=8)
        assert vocab_silhouette(h, t, out.nodes) == pytest.approx(exhaustive_best(h, t, c0, flagged), abs=1e-12)
    assert found > 0


@settings(max_examples=60, deadline=None)
@given(random_trees(), st.integers(0, 2**32 - 1), st.floats(0, 1), st.integers(1, 6))
def test_prune_output_is_covering_antichain(h, seed, alpha, width):
    t = _table(h, np.random.default_rng(seed).normal(size=(h.n_leaves, 4)))
    res = prune(h, t, ScoreParams(alpha), beam_width=width)
    nodes = res.vocab.nodes
    assert 1 <= len(nodes) <= h.n_leaves
    for leaf in h.leaves:
        assert sum(h.is_ancestor_or_self(n, leaf) for n in nodes) == 1
    for a in nodes:
        for b in nodes:
            assert a == b or not h.is_ancestor_or_self(a, b)
    assert res.trace.best_score >= res.trace.baseline_score - 1e-12


def test_validate_rejects_bad_vocab():
    h = balanced(3, 2)
    with pytest.raises(CoverageError):
        PrunedVocabulary((h.root, h.leaves[0])).validate(h)
    with pytest.raises(CoverageError):
        PrunedVocabulary((h.leaves[0],)).validate(h)
    with pytest.raises(CoverageError):
        PrunedVocabulary(()).validate(h)


# ---- domain assignment ------------------------------------------------------


def _fig1():
    edges = [("root", "heart"), ("root", "lung"), ("heart", "HF"), ("heart", "DYS"), ("lung", "COPD"), ("lung", "ASTH")]
    codes = [("428.0", "HF"), ("427.31", "DYS"), ("496", "COPD"), ("493.9", "ASTH")]
    return build_hierarchy(edges, codes)


def _patient(pid, *visits):
    return make_record(pid, [(t, {"conditions": list(v)}) for t, v in enumerate(visits)], [], 1)


def test_assign_root_is_single_domain():
    h = _fig1()
    pts = [_patient("a", ["428.0"], ["496"]), _patient("b", ["493.9"], ["493.9"])]
    lut = assign_domains(h, PrunedVocabulary((h.root,)), pts)
    assert lut.matrix.tolist() == [[1], [1]]
    assert lut.n_domains == 1


def test_assign_leaves_is_history():
    h = _fig1()
    vocab = PrunedVocabulary(tuple(h.leaves))
    codes = [c for c, _ in sorted(h.leaf_map.items(), key=lambda kv: kv[1])]
    pts = [_patient("a", ["428.0"], ["496", "427.31"]), _patient("b", ["493.9"], ["428.0"])]
    lut = assign_domains(h, vocab, pts)
    for i, p in enumerate(pts):
        assert lut.matrix[i].tolist() == aggregate_history(p, p.T, codes).tolist()
    assert lut.row("b").tolist() == lut.matrix[1].tolist()


def test_assign_fig1_groups():
    h = _fig1()
    vocab = PrunedVocabulary((h.index["heart"], h.index["lung"]))
    pts = [
        _patient("hf_dys", ["428.0"], ["427.31"]),
        _patient("hf", ["428.0"], ["428.0"]),
        _patient("copd", ["496"], ["493.9"]),
        _patient("mixed", ["428.0"], ["496"]),
        _patient("dys_asth", ["427.31"], ["493.9"]),
    ]
    lut = assign_domains(h, vocab, pts)
    assert lut.row("hf_dys").tolist() == [1, 0]
    assert lut.row("hf").tolist() == [1, 0]
    # 4 leaves give up to 16 leaf-level rows; 2 groups give at most 4
    assert lut.n_domains <= 4
    assert cohort_ids(lut.matrix).tolist() == [0, 0, 1, 2, 2]


def test_assign_unknown_code_and_empty_history():
    h = _fig1()
    vocab = PrunedVocabulary((h.index["heart"], h.index["lung"]))
    with pytest.raises(KeyError):
        assign_domains(h, vocab, [_patient("x", ["999"], ["428.0"])])
    p = make_record("e", [(0, {"drugs": ["d1"]}), (1, {"drugs": ["d2"]})], [], 1)
    lut = assign_domains(h, vocab, [p, _patient("q", ["428.0"], ["428.0"])])
    assert lut.matrix[0].tolist() == [0, 0]
    assert lut.n_domains == 2


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 30))
def test_assign_row_counts(seed, n):
    h = _fig1()
    g = np.random.default_rng(seed)
    codes = sorted(h.leaf_map)
    pts = [_patient(f"p{i}", *[g.choice(codes, size=g.integers(1, 3)).tolist() for _ in range(2)]) for i in range(n)]
    for vocab in (PrunedVocabulary((h.index["heart"], h.index["lung"])), PrunedVocabulary(tuple(h.leaves))):
        lut = assign_domains(h, vocab, pts)
        assert lut.matrix.shape == (n, len(vocab))
        assert set(np.unique(lut.matrix)) <= {0, 1}
        assert lut.matrix.sum(axis=1).min() >= 1
        assert lut.n_domains <= min(2 ** len(vocab), n)
