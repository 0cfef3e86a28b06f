"""Two-pathway trainer.

Backbone pathway: ``x -> p -> y_p`` (encoder and decoder ``d``).
Domain pathway: ``m -> r -> h -> y_h`` where ``r`` comes from an MLP over the
patient's domain-lookup row and ``h`` is ``p`` with its component along
``r`` removed. Training warms up the backbone pathway, then alternates
domain discovery, domain-encoder pretraining and co-training with a KL
coupling towards the averaged prediction.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng
from .embedding_flow import EmbeddingTable, node_embeddings
from .metrics import auprc, auroc, macro_binary
from .neural.backbone import BackboneEncoder, SequenceBatch, make_batch
from .neural.layers import MLP, Dense, sigmoid
from .neural.losses import bce_with_logits, kl_bernoulli, mmd_mean, mse
from .neural.optim import Adam
from .ontology import Hierarchy
from .pruning import DomainLookupTable, PrunedVocabulary, PruneResult, ScoreParams, assign_domains, cohort_ids, prune
from .records import CONDITIONS, PatientRecord

logger = logging.getLogger(__name__)

R_FLOOR = 1e-12


class NumericAbort(RuntimeError):
    def __init__(self, msg: str, dump: dict):
        super().__init__(msg)
        self.dump = dump


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3
    backbone_warmup_epochs: int = 40
    cotrain_epochs_per_iter: int = 20
    pretrain_epochs: int = 30
    lr_backbone: float = 1e-4
    lr_domain: float = 5e-5
    batch_size: int = 32
    lam: float = 1.0
    alpha: float = 0.5
    beam_width: int = 8
    rectify_threshold: float = 0.9
    hidden: int = 64
    mlp_hidden: tuple = (64, 32)
    dropout: float = 0.2
    emb_init_std: float = 0.01
    upward_mode: str = "children"
    purity_over: str = "all"
    cohort_mean: str = "epoch"  # or "batch"
    joint_backprop: bool = False
    seed: int = 0

    @property
    def total_epochs(self) -> int:
        return self.backbone_warmup_epochs + self.iterations * self.cotrain_epochs_per_iter

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.cohort_mean not in ("epoch", "batch"):
            raise ValueError("cohort_mean must be 'epoch' or 'batch'")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = {k: v for k, v in d.items() if k != "schema"}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        if "mlp_hidden" in d:
            d["mlp_hidden"] = tuple(d["mlp_hidden"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return {"schema": 1, **d}


@dataclass
class Split:
    """Records of one split with their dense encoder inputs and label matrix."""

    records: list
    batch: SequenceBatch
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def build(cls, records: Sequence[PatientRecord], vocab: dict, keys: list, t_max: int | None = None) -> "Split":
        recs = list(records)
        y = np.array([p.label for p in recs], dtype=float).reshape(len(recs), -1)
        return cls(recs, make_batch(recs, vocab, keys, t_max=t_max), y)


def orthogonal_project(p: np.ndarray, r: np.ndarray):
    """Split ``p`` into the part along ``r`` and the remainder.

    Works on single vectors or row batches. Returns ``(h, r_parallel,
    degenerate)``; rows with ``||r|| < 1e-12`` pass ``p`` through unchanged.
    """
    p2 = np.atleast_2d(np.asarray(p, dtype=float))
    r2 = np.atleast_2d(np.asarray(r, dtype=float))
    nn = np.sum(r2 * r2, axis=1)
    degenerate = np.sqrt(nn) < R_FLOOR
    coef = np.where(degenerate, 0.0, np.sum(p2 * r2, axis=1) / np.where(degenerate, 1.0, nn))
    r_par = coef[:, None] * r2
    h = p2 - r_par
    if degenerate.any():
        logger.debug("orthogonal_project: %d rows with vanishing r", int(degenerate.sum()))
    if np.ndim(p) == 1:
        return h[0], r_par[0], bool(degenerate[0])
    return h, r_par, degenerate


def project_backward(p: np.ndarray, r: np.ndarray, gh: np.ndarray):
    """Gradients of ``h = p - (<p,r>/<r,r>) r`` w.r.t. ``p`` and ``r`` given ``dL/dh``."""
    nn = np.sum(r * r, axis=1, keepdims=True)
    degenerate = np.sqrt(nn) < R_FLOOR
    nn = np.where(degenerate, 1.0, nn)
    s = np.sum(p * r, axis=1, keepdims=True)
    rg = np.sum(r * gh, axis=1, keepdims=True)
    gp = gh - r * rg / nn
    gr = -(s / nn) * gh - rg * (p / nn - 2.0 * s * r / nn**2)
    gp = np.where(degenerate, gh, gp)
    gr = np.where(degenerate, 0.0, gr)
    return gp, gr


class SiameseModel:
    def __init__(self, vocab_sizes: list[int], d: int, cfg: TrainConfig):
        self.cfg = cfg
        self.backbone = BackboneEncoder(vocab_sizes, h=cfg.hidden, seed=cfg.seed, emb_init_std=cfg.emb_init_std)
        width = self.backbone.out_dim
        self.decoder_p = Dense(width, d, rng.stream(cfg.seed, "decoder_p"), prefix="d.")
        self.decoder_h = Dense(width, d, rng.stream(cfg.seed, "decoder_h"), prefix="q.")
        self.domain_encoder: MLP | None = None
        self.vocab: PrunedVocabulary | None = None
        self.opt_p = Adam({**self.backbone.params, **self.decoder_p.params}, lr=cfg.lr_backbone)
        self.opt_q = Adam(self.decoder_h.params, lr=cfg.lr_backbone)
        self.opt_g: Adam | None = None

    @property
    def width(self) -> int:
        return self.backbone.out_dim

    def rebuild_domain_encoder(self, n_in: int, iteration: int) -> None:
        sizes = [n_in, *self.cfg.mlp_hidden, self.width]
        g = rng.stream(self.cfg.seed, "domain_encoder", iteration)
        self.domain_encoder = MLP(sizes, g, dropout=self.cfg.dropout, prefix="g.")
        self.opt_g = Adam(self.domain_encoder.params, lr=self.cfg.lr_domain)

    def param_blocks(self) -> dict:
        out = {**self.backbone.params, **self.decoder_p.params, **self.decoder_h.params}
        if self.domain_encoder is not None:
            out.update(self.domain_encoder.params)
        return out

    def snapshot(self) -> dict:
        return {
            "params": {k: v.copy() for k, v in self.param_blocks().items()},
            "sizes": list(self.domain_encoder.sizes) if self.domain_encoder else None,
            "vocab": self.vocab,
        }

    def restore(self, snap: dict) -> None:
        if snap["sizes"] is not None:
            n_in = snap["sizes"][0]
            if self.domain_encoder is None or self.domain_encoder.sizes != snap["sizes"]:
                self.domain_encoder = MLP(snap["sizes"], np.random.default_rng(0), dropout=self.cfg.dropout, prefix="g.")
                self.opt_g = Adam(self.domain_encoder.params, lr=self.cfg.lr_domain)
            assert self.domain_encoder.n_in == n_in
        for k, v in self.param_blocks().items():
            v[...] = snap["params"][k]
        self.vocab = snap["vocab"]

    def load_blocks(self, blocks: dict) -> None:
        g_sizes = _mlp_sizes_from_blocks(blocks, "g.")
        if g_sizes:
            self.domain_encoder = MLP(g_sizes, np.random.default_rng(0), dropout=self.cfg.dropout, prefix="g.")
            self.opt_g = Adam(self.domain_encoder.params, lr=self.cfg.lr_domain)
        for k, v in self.param_blocks().items():
            if k not in blocks:
                raise KeyError(f"checkpoint lacks parameter block {k!r}")
            if blocks[k].shape != v.shape:
                raise ValueError(f"checkpoint block {k!r} has shape {blocks[k].shape}, expected {v.shape}")
            v[...] = blocks[k]


def _mlp_sizes_from_blocks(blocks: dict, prefix: str) -> list[int]:
    sizes = []
    i = 0
    while f"{prefix}{i}.weight" in blocks:
        w = blocks[f"{prefix}{i}.weight"]
        if not sizes:
            sizes.append(w.shape[1])
        sizes.append(w.shape[0])
        i += 1
    return sizes


@dataclass
class Paths:
    """Forward-pass outputs and caches for one batch."""

    p: np.ndarray
    zp: np.ndarray
    r: np.ndarray | None = None
    h: np.ndarray | None = None
    r_par: np.ndarray | None = None
    zh: np.ndarray | None = None
    caches: dict = field(default_factory=dict)

    @property
    def yp(self) -> np.ndarray:
        return sigmoid(self.zp)

    @property
    def yh(self) -> np.ndarray:
        return sigmoid(self.zh)


def forward_paths(model: SiameseModel, batch: SequenceBatch, m_rows, train: bool = False, g=None, masks=None) -> Paths:
    p, cb = model.backbone.forward(batch)
    zp, cp = model.decoder_p.forward(p)
    out = Paths(p, zp, caches={"backbone": cb, "dec_p": cp})
    if m_rows is None or model.domain_encoder is None:
        return out
    m = np.asarray(m_rows, dtype=float)
    if m.ndim == 1:
        m = m[None, :]
    if m.shape[1] != model.domain_encoder.n_in:
        raise ValueError(f"domain row width {m.shape[1]} does not match encoder input {model.domain_encoder.n_in}")
    r, cg = model.domain_encoder.forward(m, train=train, g=g, masks=masks)
    h, r_par, _ = orthogonal_project(p, r)
    zh, ch = model.decoder_h.forward(h)
    out.r, out.h, out.r_par, out.zh = r, h, r_par, zh
    out.caches.update(g=cg, dec_h=ch)
    return out


def cotrain_losses(zp: np.ndarray, zh: np.ndarray, y: np.ndarray, lam: float):
    """Co-training objective for both pathways.

    Returns ``(L_p, L_h, dL_p/dzp, dL_h/dzh, parts)``; the reference
    ``(y_p + y_h) / 2`` is a constant.
    """
    ref = 0.5 * (sigmoid(zp) + sigmoid(zh))
    bp, gbp = bce_with_logits(zp, y)
    kp, gkp = kl_bernoulli(zp, ref)
    bh, gbh = bce_with_logits(zh, y)
    kh, gkh = kl_bernoulli(zh, ref)
    parts = {"bce_p": bp, "kl_p": kp, "bce_h": bh, "kl_h": kh}
    return bp + lam * kp, bh + lam * kh, gbp + lam * gkp, gbh + lam * gkh, parts


def cotrain_step(model: SiameseModel, batch: SequenceBatch, m_rows, y: np.ndarray, cfg: TrainConfig, g) -> dict:
    """One co-training update; returns the loss terms."""
    out = forward_paths(model, batch, m_rows, train=True, g=g)
    Lp, Lh, gzp, gzh, parts = cotrain_losses(out.zp, out.zh, y, cfg.lam)
    _check_finite({"L_p": Lp, "L_h": Lh}, out)

    gp, grads_dp = model.decoder_p.backward(out.caches["dec_p"], gzp)
    gh, grads_q = model.decoder_h.backward(out.caches["dec_h"], gzh)
    gp_from_h, gr = project_backward(out.p, out.r, gh)
    _, grads_g = model.domain_encoder.backward(out.caches["g"], gr)
    if cfg.joint_backprop:
        gp = gp + gp_from_h
    grads_b = model.backbone.backward(out.caches["backbone"], gp)
    model.opt_p.step({**grads_b, **grads_dp})
    model.opt_q.step(grads_q)
    model.opt_g.step(grads_g)
    return {"L_p": Lp, "L_h": Lh, **parts}


def backbone_step(model: SiameseModel, batch: SequenceBatch, y: np.ndarray) -> float:
    p, cb = model.backbone.forward(batch)
    zp, cp = model.decoder_p.forward(p)
    loss, gz = bce_with_logits(zp, y)
    _check_finite({"bce_p": loss}, None)
    gp, grads_dp = model.decoder_p.backward(cp, gz)
    grads_b = model.backbone.backward(cb, gp)
    model.opt_p.step({**grads_b, **grads_dp})
    return loss


def _check_finite(losses: dict, out: Paths | None) -> None:
    if all(np.isfinite(v) for v in losses.values()):
        return
    dump = {"losses": losses}
    if out is not None:
        dump.update(p_norm=float(np.linalg.norm(out.p)), r_norm=float(np.linalg.norm(out.r)) if out.r is not None else None)
    raise NumericAbort(f"non-finite loss: {losses}", dump)


def cohort_targets(P: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Per-row mean of ``P`` over rows sharing the same domain row of ``M``."""
    ids = cohort_ids(M)
    k = ids.max() + 1 if len(ids) else 0
    sums = np.zeros((k, P.shape[1]))
    np.add.at(sums, ids, P)
    counts = np.bincount(ids, minlength=k)[:, None]
    return (sums / counts)[ids]


def pretrain_domain_encoder(
    model: SiameseModel, M: np.ndarray, P: np.ndarray, cfg: TrainConfig, iteration: int = 0
) -> list[dict]:
    """Fit the domain encoder to cohort-mean patient embeddings plus the batch-mean alignment term.

    ``P`` are the (frozen) backbone embeddings of the training patients in
    the same row order as ``M``.
    """
    if len(M) == 0:
        raise ValueError("pretraining needs a non-empty training set")
    enc = model.domain_encoder
    Mf = M.astype(float)
    target_all = cohort_targets(P, M)
    history = []
    for epoch in range(cfg.pretrain_epochs):
        g = rng.stream(cfg.seed, "pretrain", iteration, epoch)
        order = g.permutation(len(M))
        tot = {"mse": 0.0, "mmd": 0.0}
        n_batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            r, cache = enc.forward(Mf[idx], train=True, g=g)
            target = target_all[idx] if cfg.cohort_mean == "epoch" else cohort_targets(P[idx], M[idx])
            l1, g1 = mse(r, target)
            l2, g2 = mmd_mean(r, P[idx])
            _check_finite({"mse": l1, "mmd": l2}, None)
            _, grads = enc.backward(cache, g1 + g2)
            model.opt_g.step(grads)
            tot["mse"] += l1
            tot["mmd"] += l2
            n_batches += 1
        history.append({k: v / n_batches for k, v in tot.items()})
    return history


def predict(model: SiameseModel, split: Split, m_rows=None, chunk: int = 512) -> tuple[np.ndarray, np.ndarray | None]:
    """Evaluation-mode probabilities ``(y_p, y_h)``; ``y_h`` is None without domain rows."""
    yp, yh = [], []
    for lo in range(0, len(split), chunk):
        idx = np.arange(lo, min(len(split), lo + chunk))
        m = None if m_rows is None else m_rows[idx]
        out = forward_paths(model, split.batch.take(idx), m)
        yp.append(out.yp)
        if out.zh is not None:
            yh.append(out.yh)
    return np.concatenate(yp), (np.concatenate(yh) if yh else None)


def embed_all(model: SiameseModel, split: Split, m_rows) -> dict:
    """``p``, ``r``, parallel component and invariant part for every patient of a split."""
    out = forward_paths(model, split.batch, m_rows)
    return {"p": out.p, "r": out.r, "r_par": out.r_par, "h": out.h}


def _score(y_true: np.ndarray, y_score: np.ndarray) -> dict:
    return {"auprc": _safe(auprc, y_score, y_true), "auroc": _safe(auroc, y_score, y_true)}


def _safe(fn, s, y) -> float:
    try:
        return macro_binary(fn, s, y)
    except ValueError:
        return float("nan")


def leaf_table_from_backbone(model: SiameseModel, cond_vocab: list[str]) -> dict:
    emb = model.backbone.embedding(0)
    return {code: emb[i] for i, code in enumerate(cond_vocab)}


def discover_domains(
    model: SiameseModel, h: Hierarchy, cond_vocab: list[str], cfg: TrainConfig
) -> tuple[PruneResult, EmbeddingTable]:
    table = node_embeddings(
        h, leaf_table_from_backbone(model, cond_vocab), cfg.hidden, cfg.rectify_threshold, cfg.upward_mode
    )
    res = prune(h, table, ScoreParams(cfg.alpha, cfg.purity_over), cfg.beam_width)
    return res, table


@dataclass
class TrainResult:
    model: SiameseModel
    lookup: DomainLookupTable | None  # final M over the training patients
    ledger: list
    best_val_auprc: float
    best_epoch: int
    prune_results: list = field(default_factory=list)


def _batches(n: int, size: int, g: np.random.Generator):
    order = g.permutation(n)
    for lo in range(0, n, size):
        yield order[lo : lo + size]


def train_backbone_only(
    train: Split, val: Split, vocab_sizes: list[int], cfg: TrainConfig, epochs: int | None = None, tag: str = "base"
) -> TrainResult:
    """Backbone pathway alone (the Base / Oracle ablations), best epoch by validation AUPRC."""
    model = SiameseModel(vocab_sizes, train.y.shape[1], cfg)
    ledger = []
    best = (-np.inf, 0, None)
    for epoch in range(1, (epochs or cfg.total_epochs) + 1):
        g = rng.stream(cfg.seed, tag, "epoch", epoch)
        losses = [backbone_step(model, train.batch.take(idx), train.y[idx]) for idx in _batches(len(train), cfg.batch_size, g)]
        yp, _ = predict(model, val)
        sc = _score(val.y, yp)
        ledger.append({"phase": tag, "epoch": epoch, "bce_p": float(np.mean(losses)), "val_auprc_p": sc["auprc"], "val_auroc_p": sc["auroc"]})
        if sc["auprc"] > best[0]:
            best = (sc["auprc"], epoch, model.snapshot())
    if best[2] is not None:
        model.restore(best[2])
    return TrainResult(model, None, ledger, float(best[0]), best[1])


def iterative_train(
    train: Split,
    val: Split,
    h: Hierarchy,
    vocab: dict,
    cfg: TrainConfig,
    on_iteration: Callable | None = None,
    init: dict | None = None,
) -> TrainResult:
    """Warm-up, then ``cfg.iterations`` rounds of discovery, pretraining and co-training.

    The returned model is the checkpoint with the best validation AUPRC of
    ``y_h`` over all co-training epochs. ``init`` optionally warm-starts the
    backbone and decoders from saved parameter blocks (the domain encoder is
    rebuilt every iteration regardless).
    """
    vocab_sizes = [len(v) for v in vocab.values()]
    cond_vocab = vocab[CONDITIONS]
    model = SiameseModel(vocab_sizes, train.y.shape[1], cfg)
    if init is not None:
        for k, v in model.param_blocks().items():
            if k in init:
                if init[k].shape != v.shape:
                    raise ValueError(f"initial block {k!r} has shape {init[k].shape}, expected {v.shape}")
                v[...] = init[k]
    ledger: list[dict] = []

    for epoch in range(1, cfg.backbone_warmup_epochs + 1):
        g = rng.stream(cfg.seed, "warmup", epoch)
        losses = [backbone_step(model, train.batch.take(idx), train.y[idx]) for idx in _batches(len(train), cfg.batch_size, g)]
        yp, _ = predict(model, val)
        sc = _score(val.y, yp)
        ledger.append({"phase": "warmup", "epoch": epoch, "bce_p": float(np.mean(losses)), "val_auprc_p": sc["auprc"], "val_auroc_p": sc["auroc"]})

    best = (-np.inf, 0, None, None)
    prune_results = []
    epoch = cfg.backbone_warmup_epochs
    for it in range(1, cfg.iterations + 1):
        res, _ = discover_domains(model, h, cond_vocab, cfg)
        prune_results.append(res)
        model.vocab = res.vocab
        M_tr = assign_domains(h, res.vocab, train.records)
        M_val = assign_domains(h, res.vocab, val.records).matrix.astype(float)
        model.rebuild_domain_encoder(len(res.vocab), it)
        P = model.backbone.encode(train.batch)
        pre = pretrain_domain_encoder(model, M_tr.matrix, P, cfg, it)
        ledger.append({
            "phase": "discover", "iteration": it, "vocab_size": len(res.vocab),
            "n_domains": M_tr.n_domains, "flagged": len(res.flagged),
            "silhouette": res.trace.best_score,
        })
        for k, rec in enumerate(pre, start=1):
            ledger.append({"phase": "pretrain", "iteration": it, "epoch": k, **rec})
        Mf = M_tr.matrix.astype(float)
        for _ in range(cfg.cotrain_epochs_per_iter):
            epoch += 1
            g = rng.stream(cfg.seed, "cotrain", epoch)
            acc: dict = {}
            n = 0
            for idx in _batches(len(train), cfg.batch_size, g):
                terms = cotrain_step(model, train.batch.take(idx), Mf[idx], train.y[idx], cfg, g)
                for k, v in terms.items():
                    acc[k] = acc.get(k, 0.0) + v
                n += 1
            yp, yh = predict(model, val, M_val)
            sp, sh = _score(val.y, yp), _score(val.y, yh)
            ledger.append({
                "phase": "cotrain", "iteration": it, "epoch": epoch,
                **{k: v / n for k, v in acc.items()},
                "val_auprc_p": sp["auprc"], "val_auroc_p": sp["auroc"],
                "val_auprc_h": sh["auprc"], "val_auroc_h": sh["auroc"],
            })
            if sh["auprc"] > best[0]:
                best = (sh["auprc"], epoch, model.snapshot(), M_tr)
        if on_iteration is not None:
            on_iteration(it, model, res)

    model.restore(best[2])
    return TrainResult(model, best[3], ledger, float(best[0]), best[1], prune_results)
