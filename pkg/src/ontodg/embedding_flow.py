"""Node embeddings for the whole hierarchy: leaf initialization, upward averaging
and LCA rectification by greedy similarity merging."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .ontology import Hierarchy

logger = logging.getLogger(__name__)

BACKBONE = "backbone"
HASHED = "hashed"


@dataclass
class EmbeddingTable:
    """One row per NodeId. ``provenance`` marks how each leaf vector was obtained."""

    vectors: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.vectors.copy(), dict(self.provenance))

    def __getitem__(self, n: int) -> np.ndarray:
        return self.vectors[n]


@dataclass
class Merge:
    a: int
    b: int
    lca: int
    similarity: float


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        logger.warning("cosine similarity with a zero vector, defined as 0")
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def hashed_vector(name: str, dim: int) -> np.ndarray:
    """Deterministic stand-in embedding drawn from a stream keyed by the node name."""
    bound = 1.0 / np.sqrt(dim)
    return rng.stream(0, "node-name", name).uniform(-bound, bound, size=dim)


def init_leaf_embeddings(h: Hierarchy, backbone_table: dict, dim: int) -> EmbeddingTable:
    """Leaf vectors from ``backbone_table`` (code -> vector) where present, hashed names elsewhere.

    Internal rows are left as NaN until :func:`upward_average` fills them.
    A leaf with several codes present takes the mean of their vectors.
    """
    vecs = np.full((len(h), dim), np.nan)
    prov = {}
    codes_of: dict[int, list[str]] = {}
    for code, leaf in h.leaf_map.items():
        codes_of.setdefault(leaf, []).append(code)
    for leaf in h.leaves:
        present = [backbone_table[c] for c in sorted(codes_of.get(leaf, [])) if c in backbone_table]
        for v in present:
            if len(v) != dim:
                raise ValueError(f"backbone vector has length {len(v)}, expected {dim}")
        if present:
            vecs[leaf] = np.mean(present, axis=0)
            prov[leaf] = BACKBONE
        else:
            vecs[leaf] = hashed_vector(h.names[leaf], dim)
            prov[leaf] = HASHED
    return EmbeddingTable(vecs, prov)


def upward_average(h: Hierarchy, leaves: EmbeddingTable, mode: str = "children") -> EmbeddingTable:
    """Fill internal nodes bottom-up.

    ``mode="children"`` averages the direct children (level by level);
    ``mode="leaves"`` averages all leaf descendants directly.
    """
    table = leaves.copy()
    v = table.vectors
    if np.isnan(v[h.leaves]).any():
        raise ValueError("upward_average needs every leaf vector set")
    for node in reversed(h.bfs()):
        ch = h.children[node]
        if not ch:
            continue
        if mode == "children":
            v[node] = v[ch].mean(axis=0)
        elif mode == "leaves":
            v[node] = v[sorted(h.leaf_descendants(node))].mean(axis=0)
        else:
            raise ValueError(f"unknown mode {mode!r}")
    return table


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x)
    return x / n if n > 0 else np.zeros_like(x)


def lca_rectify(h: Hierarchy, table: EmbeddingTable, threshold: float = 0.9, log: list | None = None) -> EmbeddingTable:
    """Greedy agglomeration over leaves and sub-clusters.

    While the most similar active pair has cosine similarity above
    ``threshold``, its LCA is re-averaged with both members and replaces
    them in the active set. Ties go to the lexicographically smallest
    (NodeId, NodeId) pair. Merges are appended to ``log`` when given.
    """
    out = table.copy()
    vec = out.vectors
    cap = 2 * h.n_leaves
    node_of = np.full(cap, -1)
    units = np.zeros((cap, out.dim))
    alive = np.zeros(cap, dtype=bool)
    slot_of: dict[int, int] = {}
    n_slots = 0
    for leaf in h.leaves:
        node_of[n_slots] = leaf
        units[n_slots] = _unit(vec[leaf])
        alive[n_slots] = True
        slot_of[leaf] = n_slots
        n_slots += 1
    sim = np.full((cap, cap), -np.inf)
    S = units[:n_slots] @ units[:n_slots].T
    sim[:n_slots, :n_slots] = np.clip(S, -1.0, 1.0)
    np.fill_diagonal(sim, -np.inf)

    def refresh(s: int) -> None:
        row = np.clip(units @ units[s], -1.0, 1.0)
        row[~alive] = -np.inf
        row[s] = -np.inf
        sim[s, :] = row
        sim[:, s] = row

    while alive.sum() > 1:
        best = sim.max()
        if not best > threshold:
            break
        ii, jj = np.nonzero(sim == best)
        pairs = sorted({tuple(sorted((int(node_of[i]), int(node_of[j])))) for i, j in zip(ii, jj) if i != j})
        a, b = pairs[0]
        anc = h.lca(a, b)
        vec[anc] = (vec[anc] + vec[a] + vec[b]) / 3.0
        if log is not None:
            log.append(Merge(a, b, anc, float(best)))
        for n in (a, b):
            s = slot_of.pop(n)
            alive[s] = False
            sim[s, :] = -np.inf
            sim[:, s] = -np.inf
        if anc in slot_of:
            s = slot_of[anc]
        else:
            s = n_slots
            n_slots += 1
            node_of[s] = anc
            slot_of[anc] = s
            alive[s] = True
        units[s] = _unit(vec[anc])
        refresh(s)
    return out


def node_embeddings(
    h: Hierarchy,
    backbone_table: dict,
    dim: int,
    threshold: float = 0.9,
    mode: str = "children",
    log: list | None = None,
) -> EmbeddingTable:
    """Leaf init, upward averaging and LCA rectification in one call."""
    return lca_rectify(h, upward_average(h, init_leaf_embeddings(h, backbone_table, dim), mode), threshold, log)


def write_embeddings(path: str | Path, table: EmbeddingTable) -> None:
    """Binary dump: uint32 node count, uint32 dim, then float32 rows (little endian)."""
    n, d = table.vectors.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", n, d))
        fh.write(np.ascontiguousarray(table.vectors, dtype="<f4").tobytes())


def read_embeddings(path: str | Path) -> EmbeddingTable:
    data = Path(path).read_bytes()
    n, d = struct.unpack_from("<II", data, 0)
    vecs = np.frombuffer(data, dtype="<f4", count=n * d, offset=8).reshape(n, d).astype(float)
    return EmbeddingTable(vecs)
