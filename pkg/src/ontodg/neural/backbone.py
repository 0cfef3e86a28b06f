"""Per-key visit-sequence encoder with single-head attention pooling.

For every feature key a visit vector is the mean of its code embeddings,
a sinusoidal position encoding (by visit index) is added, and single-head
scaled dot-product attention with the last visit as query pools the
sequence. An output layer maps the pooled vector to ``p_k``; the patient
embedding is the concatenation of ``p_k`` over keys.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import rng
from ..records import PatientRecord
from .layers import Dense

NEG = -1e30


def sinusoidal(T: int, h: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(h)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / h)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class SequenceBatch:
    """Dense per-key inputs for a batch of patients.

    ``x[k]`` has shape (B, T, V_k) with each real visit row normalized to
    sum to one (zero rows for visits without codes of that key and for
    padding). ``last`` holds the index of each patient's final visit.
    """

    x: list
    mask: np.ndarray
    last: np.ndarray

    def __len__(self) -> int:
        return self.mask.shape[0]

    def take(self, idx) -> "SequenceBatch":
        return SequenceBatch([xk[idx] for xk in self.x], self.mask[idx], self.last[idx])


def make_batch(
    records: list[PatientRecord],
    vocab: dict[str, list[str]],
    keys: list[str],
    upto: int | None = None,
    t_max: int | None = None,
) -> SequenceBatch:
    """Encode records (visits ``1..upto``, default all) into a :class:`SequenceBatch`."""
    lengths = [min(p.T, upto) if upto else p.T for p in records]
    T = t_max or max(lengths)
    B = len(records)
    index = {k: {c: i for i, c in enumerate(vocab[k])} for k in keys}
    x = [np.zeros((B, T, len(vocab[k]))) for k in keys]
    mask = np.zeros((B, T), dtype=bool)
    for b, (p, L) in enumerate(zip(records, lengths)):
        mask[b, :L] = True
        for t in range(L):
            v = p.visits[t]
            for j, k in enumerate(keys):
                codes = v.key_codes(k)
                if not codes:
                    continue
                try:
                    cols = [index[k][c] for c in codes]
                except KeyError as e:
                    raise KeyError(f"patient {p.id}: unknown {k} code {e.args[0]!r}") from None
                x[j][b, t, cols] += 1.0 / len(codes)
    return SequenceBatch(x, mask, np.array(lengths) - 1)


class BackboneEncoder:
    def __init__(
        self,
        vocab_sizes: list[int],
        h: int = 64,
        seed: int = 0,
        use_position: bool = True,
        emb_init_std: float = 0.1,
        t_max: int = 64,
    ):
        self.vocab_sizes = list(vocab_sizes)
        self.h = h
        self.K = len(vocab_sizes)
        self.use_position = use_position
        self.pe = sinusoidal(t_max, h)
        self.params: dict[str, np.ndarray] = {}
        self.blocks = []
        for k, V in enumerate(vocab_sizes):
            g = rng.stream(seed, "backbone", k)
            self.params[f"f{k}.emb"] = g.normal(0.0, emb_init_std, size=(V, h))
            blk = {name: Dense(h, h, g, prefix=f"f{k}.{name}.") for name in ("query", "key", "value", "out")}
            for layer in blk.values():
                self.params.update(layer.params)
            self.blocks.append(blk)

    @property
    def out_dim(self) -> int:
        return self.K * self.h

    def embedding(self, k: int) -> np.ndarray:
        return self.params[f"f{k}.emb"]

    def _forward_key(self, k: int, xk: np.ndarray, mask: np.ndarray, last: np.ndarray):
        blk = self.blocks[k]
        B, T, _ = xk.shape
        Z = xk @ self.embedding(k)
        if self.use_position:
            Z = Z + self.pe[:T]
        ar = np.arange(B)
        zl = Z[ar, last]
        q, _ = blk["query"].forward(zl)
        Kt, _ = blk["key"].forward(Z)
        Vt, _ = blk["value"].forward(Z)
        s = np.einsum("bth,bh->bt", Kt, q) / np.sqrt(self.h)
        s = np.where(mask, s, NEG)
        s = s - s.max(axis=1, keepdims=True)
        a = np.exp(s) * mask
        a /= a.sum(axis=1, keepdims=True)
        c = np.einsum("bt,bth->bh", a, Vt)
        pk, _ = blk["out"].forward(c)
        return pk, (xk, Z, zl, q, Kt, Vt, a, c, last)

    def forward(self, batch: SequenceBatch):
        outs, caches = [], []
        for k in range(self.K):
            pk, cache = self._forward_key(k, batch.x[k], batch.mask, batch.last)
            outs.append(pk)
            caches.append(cache)
        return np.concatenate(outs, axis=1), caches

    def _backward_key(self, k: int, cache, gp: np.ndarray) -> dict:
        blk = self.blocks[k]
        xk, Z, zl, q, Kt, Vt, a, c, last = cache
        B, T, _ = Z.shape
        grads = {}
        gc, gr = blk["out"].backward(c, gp)
        grads.update(gr)
        ga = np.einsum("bh,bth->bt", gc, Vt)
        gV = a[:, :, None] * gc[:, None, :]
        gs = a * (ga - np.sum(a * ga, axis=1, keepdims=True))
        scale = 1.0 / np.sqrt(self.h)
        gq = np.einsum("bt,bth->bh", gs, Kt) * scale
        gK = gs[:, :, None] * q[:, None, :] * scale
        gzl, gr = blk["query"].backward(zl, gq)
        grads.update(gr)
        gZ, gr = blk["key"].backward(Z, gK)
        grads.update(gr)
        gZv, gr = blk["value"].backward(Z, gV)
        grads.update(gr)
        gZ = gZ + gZv
        gZ[np.arange(B), last] += gzl
        grads[f"f{k}.emb"] = xk.reshape(B * T, -1).T @ gZ.reshape(B * T, -1)
        return grads

    def backward(self, caches, gp: np.ndarray) -> dict:
        grads = {}
        for k in range(self.K):
            grads.update(self._backward_key(k, caches[k], gp[:, k * self.h : (k + 1) * self.h]))
        return {name: grads[name] for name in self.params}

    def encode(self, batch: SequenceBatch) -> np.ndarray:
        return self.forward(batch)[0]


def encode_patient(
    enc: BackboneEncoder,
    p: PatientRecord,
    vocab: dict[str, list[str]],
    keys: list[str],
    upto: int | None = None,
) -> np.ndarray:
    """Embedding of one patient from visits ``1..upto`` (length ``K * h``)."""
    if upto is not None and not 1 <= upto <= p.T:
        raise IndexError(f"upto={upto} outside [1, {p.T}]")
    return enc.encode(make_batch([p], vocab, keys, upto=upto))[0]
