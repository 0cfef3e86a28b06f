"""Hierarchy pruning into a covering antichain and the patient domain lookup table.

Node score::

    S(n) = alpha * exp(pur(n)) + (1 - alpha) * cov(n) * dep(n)

with purity the mean cosine similarity between a node and its descendants,
coverage the fraction of leaves under the node and depth ``level / H``.
A bottom-up pass turns scores into a first candidate set plus ambiguous
(parent, children) pairs, which a beam search resolves by the silhouette of
the induced leaf clustering.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embedding_flow import EmbeddingTable
from .ontology import Hierarchy
from .records import CONDITIONS, PatientRecord

logger = logging.getLogger(__name__)


class SilhouetteUndefined(ValueError):
    pass


class CoverageError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreParams:
    alpha: float = 0.5
    purity_over: str = "all"  # "all" descendants or "leaves" only

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.purity_over not in ("all", "leaves"):
            raise ValueError(f"purity_over must be 'all' or 'leaves', got {self.purity_over!r}")


@dataclass(frozen=True)
class FlaggedPair:
    parent: int
    children: tuple


@dataclass(frozen=True)
class PrunedVocabulary:
    nodes: tuple

    def __len__(self) -> int:
        return len(self.nodes)

    def validate(self, h: Hierarchy) -> None:
        """Raise :class:`CoverageError` unless every leaf has exactly one covering node."""
        if not self.nodes:
            raise CoverageError("empty pruned vocabulary")
        count = np.zeros(len(h), dtype=int)
        for n in self.nodes:
            for leaf in h.leaf_descendants(n):
                count[leaf] += 1
        bad = [leaf for leaf in h.leaves if count[leaf] != 1]
        if bad:
            leaf = bad[0]
            raise CoverageError(f"leaf {h.names[leaf]!r} is covered {count[leaf]} times ({len(bad)} bad leaves)")

    def column_of_leaf(self, h: Hierarchy) -> dict[int, int]:
        out = {}
        for j, n in enumerate(self.nodes):
            for leaf in h.leaf_descendants(n):
                out[leaf] = j
        return out


def _unit_rows(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=1, keepdims=True)
    return np.divide(v, n, out=np.zeros_like(v), where=n > 0)


def node_indicators(h: Hierarchy, table: EmbeddingTable, n: int, params: ScoreParams = ScoreParams()):
    """(purity, coverage, depth) of node ``n``."""
    if h.is_leaf(n):
        pur = 1.0
    else:
        members = h.descendants(n) if params.purity_over == "all" else h.leaf_descendants(n)
        u = _unit_rows(table.vectors[sorted(members)])
        un = _unit_rows(table.vectors[n : n + 1])[0]
        pur = float(np.mean(np.clip(u @ un, -1.0, 1.0)))
    cov = len(h.leaf_descendants(n)) / h.n_leaves
    dep = h.level[n] / h.H
    return pur, cov, dep


def node_score(h: Hierarchy, table: EmbeddingTable, n: int, params: ScoreParams = ScoreParams()) -> float:
    pur, cov, dep = node_indicators(h, table, n, params)
    return params.alpha * np.exp(pur) + (1.0 - params.alpha) * cov * dep


def all_scores(h: Hierarchy, table: EmbeddingTable, params: ScoreParams = ScoreParams()) -> np.ndarray:
    return np.array([node_score(h, table, n, params) for n in range(len(h))])


def candidate_init(h: Hierarchy, scores) -> tuple[list[int], list[FlaggedPair]]:
    """Bottom-up pass from level H-1 to 1.

    A parent scoring above all its children replaces everything selected
    under it; one scoring below all of them is dropped; anything in between
    is dropped but flagged for refinement.
    """
    S = np.asarray(scores, dtype=float)
    frontier = set(h.leaves)
    flagged = []
    for level in range(h.H - 1, 0, -1):
        for p in h.nodes_at_level(level):
            ch = h.children[p]
            cs = S[ch]
            if S[p] > cs.max():
                frontier = {n for n in frontier if not h.is_ancestor_or_self(p, n)}
                frontier.add(p)
            elif S[p] < cs.min():
                continue
            else:
                flagged.append(FlaggedPair(p, tuple(ch)))
    return sorted(frontier), flagged


def silhouette_labels(D: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette from a distance matrix and integer cluster labels.

    Singleton clusters contribute 0, as do points with ``a = b = 0``.
    """
    uniq, lab = np.unique(labels, return_inverse=True)
    k = len(uniq)
    if k < 2:
        raise SilhouetteUndefined("refinement metric undefined: fewer than 2 clusters")
    onehot = np.zeros((len(lab), k))
    onehot[np.arange(len(lab)), lab] = 1.0
    sizes = onehot.sum(axis=0)
    sums = D @ onehot
    rows = np.arange(len(lab))
    own = sizes[lab]
    a = np.where(own > 1, sums[rows, lab] / np.maximum(own - 1, 1), 0.0)
    mean_other = sums / sizes
    mean_other[rows, lab] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def distance_matrix(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def silhouette(leaf_vectors: dict, assignment: dict) -> float:
    """Silhouette of leaves (NodeId -> vector) under ``assignment`` (leaf -> cluster NodeId)."""
    leaves = sorted(leaf_vectors)
    X = np.array([leaf_vectors[n] for n in leaves], dtype=float)
    labels = np.array([assignment[n] for n in leaves])
    return silhouette_labels(distance_matrix(X), labels)


class _Scorer:
    """Silhouette of antichains over a fixed leaf distance matrix."""

    def __init__(self, h: Hierarchy, table: EmbeddingTable):
        self.h = h
        self.pos = h.leaf_position
        self.D = distance_matrix(table.vectors[h.leaves])
        self.under = {}

    def leaves_under(self, n: int) -> np.ndarray:
        if n not in self.under:
            self.under[n] = np.array(sorted(self.pos[x] for x in self.h.leaf_descendants(n)))
        return self.under[n]

    def labels(self, state) -> np.ndarray:
        lab = np.full(self.h.n_leaves, -1)
        for j, n in enumerate(sorted(state)):
            lab[self.leaves_under(n)] = j
        return lab

    def __call__(self, state) -> float:
        if len(state) < 2:
            return float("-inf")
        return silhouette_labels(self.D, self.labels(state))


def apply_parent(h: Hierarchy, state: frozenset, p: int) -> frozenset:
    """Resolve a flagged pair towards its parent: ``p`` replaces everything under it."""
    if any(h.is_ancestor_or_self(n, p) for n in state):
        return state
    return frozenset({n for n in state if not h.is_ancestor_or_self(p, n)} | {p})


@dataclass
class BeamTrace:
    steps: list = field(default_factory=list)  # (flagged parent, n candidates, best silhouette)
    best_score: float = float("-inf")
    baseline_score: float = float("-inf")


def beam_refine(
    h: Hierarchy,
    table: EmbeddingTable,
    c0: Sequence[int],
    flagged: Sequence[FlaggedPair],
    beam_width: int = 8,
    trace: BeamTrace | None = None,
) -> PrunedVocabulary:
    """Resolve flagged pairs in order, keeping the ``beam_width`` best partial solutions.

    Each partial solution is a full antichain (unresolved pairs default to
    their children). Candidates are ranked by silhouette, ties by the sorted
    node tuple.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    score = _Scorer(h, table)
    start = frozenset(c0)
    beam = [(score(start), start)]
    if trace is not None:
        trace.baseline_score = beam[0][0]
    for pair in flagged:
        cand = {}
        for _, state in beam:
            for nxt in (state, apply_parent(h, state, pair.parent)):
                if nxt not in cand:
                    cand[nxt] = score(nxt)
        ranked = sorted(cand.items(), key=lambda kv: (-kv[1], tuple(sorted(kv[0]))))
        beam = [(s, st) for st, s in ranked[:beam_width]]
        if trace is not None:
            trace.steps.append((pair.parent, len(cand), beam[0][0]))
    best = beam[0][1]
    if trace is not None:
        trace.best_score = beam[0][0]
    vocab = PrunedVocabulary(tuple(sorted(best)))
    vocab.validate(h)
    return vocab


def exhaustive_refine(h: Hierarchy, table: EmbeddingTable, c0, flagged) -> tuple[float, PrunedVocabulary]:
    """Try all 2^N resolutions of the flagged pairs; returns (best silhouette, set)."""
    score = _Scorer(h, table)
    best = (float("-inf"), ())
    for bits in range(1 << len(flagged)):
        state = frozenset(c0)
        for i, pair in enumerate(flagged):
            if bits >> i & 1:
                state = apply_parent(h, state, pair.parent)
        s = score(state)
        key = tuple(sorted(state))
        if s > best[0] or (s == best[0] and key < best[1]):
            best = (s, key)
    return best[0], PrunedVocabulary(best[1])


@dataclass
class PruneResult:
    vocab: PrunedVocabulary
    scores: np.ndarray
    c0: list
    flagged: list
    trace: BeamTrace


def prune(h: Hierarchy, table: EmbeddingTable, params: ScoreParams = ScoreParams(), beam_width: int = 8) -> PruneResult:
    scores = all_scores(h, table, params)
    c0, flagged = candidate_init(h, scores)
    trace = BeamTrace()
    vocab = beam_refine(h, table, c0, flagged, beam_width, trace)
    return PruneResult(vocab, scores, c0, flagged, trace)


@dataclass
class DomainLookupTable:
    matrix: np.ndarray  # uint8, patients x |vocab|
    vocab: PrunedVocabulary
    row_ids: list

    def row(self, pid: str) -> np.ndarray:
        return self.matrix[self.row_ids.index(pid)]

    def domain_index(self) -> np.ndarray:
        """Integer cohort id per row; rows with identical bits share an id (first-seen order)."""
        return cohort_ids(self.matrix)

    @property
    def n_domains(self) -> int:
        return int(self.domain_index().max()) + 1 if len(self.row_ids) else 0


def cohort_ids(M: np.ndarray) -> np.ndarray:
    seen: dict = {}
    out = np.empty(M.shape[0], dtype=int)
    for i, row in enumerate(M):
        out[i] = seen.setdefault(row.tobytes(), len(seen))
    return out


def assign_domains(
    h: Hierarchy, vocab: PrunedVocabulary, patients: Sequence[PatientRecord], key: str = CONDITIONS
) -> DomainLookupTable:
    """``M[i, j] = 1`` iff patient i's full history has a code under vocab node j.

    Patients without condition codes get an all-zero row (their own cohort).
    """
    col = vocab.column_of_leaf(h)
    M = np.zeros((len(patients), len(vocab)), dtype=np.uint8)
    for i, p in enumerate(patients):
        for v in p.visits:
            for c in v.key_codes(key):
                M[i, col[h.leaf_of(c)]] = 1
    return DomainLookupTable(M, vocab, [p.id for p in patients])
