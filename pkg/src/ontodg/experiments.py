"""Synthetic domain-shift benchmark: Base vs hierarchy-guided model vs Oracle."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng
from .metrics import auprc, auroc, macro_binary
from .pruning import assign_domains, cohort_ids
from .records import build_vocab, feature_keys, temporal_split
from .siamese import Split, TrainConfig, iterative_train, predict, train_backbone_only
from .synth import SynthConfig, generate_cohorts, generate_hierarchy

logger = logging.getLogger(__name__)


@dataclass
class Prepared:
    h: object
    cohort: object
    keys: list
    vocab: dict
    train: Split
    val: Split
    target_train: Split
    target_val: Split
    target_eval: Split


def split_target(test: list, seed: int, fit_fraction: float = 0.5, val_fraction: float = 0.15):
    """Divide target-period patients into Oracle fit (train/val) and a shared evaluation half."""
    order = rng.stream(seed, "target_split").permutation(len(test))
    n_fit = int(round(len(test) * fit_fraction))
    fit = [test[i] for i in sorted(order[:n_fit])]
    ev = [test[i] for i in sorted(order[n_fit:])]
    n_val = int(round(len(fit) * val_fraction))
    return fit[n_val:], fit[:n_val], ev


def prepare_records(h, records: list, cutoff_day: int, split_seed: int = 0, cohort=None) -> Prepared:
    """Temporal split plus the Oracle/evaluation division of the target period."""
    keys = feature_keys(records)
    vocab = build_vocab(records, keys)
    tr, va, te = temporal_split(records, cutoff_day, seed=split_seed)
    t_tr, t_va, t_ev = split_target(te, split_seed)
    t_max = max(p.T for p in records)
    mk = lambda rs: Split.build(rs, vocab, keys, t_max)  # noqa: E731
    return Prepared(h, cohort, keys, vocab, mk(tr), mk(va), mk(t_tr), mk(t_va), mk(t_ev))


def prepare(scfg: SynthConfig, split_seed: int = 0) -> Prepared:
    h = generate_hierarchy(scfg)
    cohort = generate_cohorts(scfg, h)
    return prepare_records(h, cohort.records, scfg.cutoff_day, split_seed, cohort)


def _metric(fn, s, y) -> float:
    try:
        return macro_binary(fn, s, y)
    except ValueError:
        return float("nan")


@dataclass
class SeedResult:
    seed: int
    scores: dict = field(default_factory=dict)  # method -> {"auroc":, "auprc":}
    vocab_size: int = 0
    n_domains: int = 0
    seconds: float = 0.0
    prepared: Prepared | None = None
    trained: object = None  # TrainResult of the hierarchy-guided model when kept


def run_seed(
    scfg: SynthConfig, tcfg: TrainConfig, seed: int, methods=("base", "udon", "oracle"), keep: bool = False
) -> SeedResult:
    """Train the requested methods on one seed and score them on the shared target half.

    ``keep`` retains the prepared splits and the trained model for later probing.
    """
    t0 = time.perf_counter()
    scfg = replace(scfg, seed=seed)
    tcfg = replace(tcfg, seed=seed)
    d = prepare(scfg, split_seed=seed)
    sizes = [len(d.vocab[k]) for k in d.keys]
    ev = d.target_eval
    out = SeedResult(seed)
    if "base" in methods:
        base = train_backbone_only(d.train, d.val, sizes, tcfg, tag="base")
        yp, _ = predict(base.model, ev)
        out.scores["base"] = {"auroc": _metric(auroc, yp, ev.y), "auprc": _metric(auprc, yp, ev.y)}
    if "udon" in methods:
        res = iterative_train(d.train, d.val, d.h, d.vocab, tcfg)
        M_ev = assign_domains(d.h, res.model.vocab, ev.records).matrix.astype(float)
        yp, yh = predict(res.model, ev, M_ev)
        out.scores["udon"] = {"auroc": _metric(auroc, yh, ev.y), "auprc": _metric(auprc, yh, ev.y)}
        out.scores["udon_p"] = {"auroc": _metric(auroc, yp, ev.y), "auprc": _metric(auprc, yp, ev.y)}
        out.vocab_size = len(res.model.vocab)
        out.n_domains = int(cohort_ids(res.lookup.matrix).max() + 1)
        if keep:
            out.trained = res
    if "oracle" in methods:
        orc = train_backbone_only(d.target_train, d.target_val, sizes, tcfg, tag="oracle")
        yp, _ = predict(orc.model, ev)
        out.scores["oracle"] = {"auroc": _metric(auroc, yp, ev.y), "auprc": _metric(auprc, yp, ev.y)}
    out.seconds = time.perf_counter() - t0
    if keep:
        out.prepared = d
    return out


def benchmark(scfg: SynthConfig, tcfg: TrainConfig, seeds, keep: bool = False) -> list[SeedResult]:
    results = []
    for s in seeds:
        r = run_seed(scfg, tcfg, s, keep=keep)
        logger.info("seed %d: %s (%.1fs)", s, r.scores, r.seconds)
        results.append(r)
    return results


def summarize(results: list[SeedResult]) -> dict:
    methods = sorted({m for r in results for m in r.scores})
    return {
        m: {k: float(np.mean([r.scores[m][k] for r in results])) for k in ("auroc", "auprc")}
        for m in methods
    }
