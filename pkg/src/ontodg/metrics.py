"""Evaluation metrics for binary and multi-label clinical prediction."""

from __future__ import annotations

import logging

import numpy as np

logger = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    pass


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=float).ravel()


def auroc(scores, targets) -> float:
    """Mann-Whitney AUROC; tied (positive, negative) pairs count one half.

    The numerator is accumulated as an integer count of half-pairs so the
    result is exactly the pair-counting value.
    """
    s, y = _vec(scores), _vec(targets).astype(bool)
    pos, neg = s[y], np.sort(s[~y])
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetricError("auroc needs at least one positive and one negative")
    below = np.searchsorted(neg, pos, side="left")
    upto = np.searchsorted(neg, pos, side="right")
    halves = int(np.sum(2 * below + (upto - below), dtype=np.int64))
    return halves / (2 * len(pos) * len(neg))


def auprc(scores, targets) -> float:
    """Average precision with stable index-order tie breaking."""
    s, y = _vec(scores), _vec(targets).astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("auprc needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, n_pos + 1) / ranks
    return float(precision.sum() / n_pos)


def _f1(tp: float, fp: float, fn: float) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def f1_binary(scores, targets, threshold: float = 0.5, average: str = "samples") -> float:
    """F1 at ``threshold``.

    1-D inputs give the ordinary binary F1. 2-D (multi-label) inputs give the
    per-sample F1 averaged over samples (``average="samples"``) or the
    micro-averaged F1 (``average="micro"``).
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(targets).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"shape mismatch {s.shape} vs {y.shape}")
    pred = s >= threshold
    if s.ndim == 1 or average == "micro":
        tp = float(np.sum(pred & y))
        fp = float(np.sum(pred & ~y))
        fn = float(np.sum(~pred & y))
        if 2 * tp + fp + fn == 0:
            logger.warning("f1: zero denominator, returning 0")
        return _f1(tp, fp, fn)
    tp = np.sum(pred & y, axis=1)
    fp = np.sum(pred & ~y, axis=1)
    fn = np.sum(~pred & y, axis=1)
    denom = 2 * tp + fp + fn
    per = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    return float(per.mean())


def weighted_f1(scores, targets, threshold: float = 0.5) -> float:
    """Per-class F1 averaged with weights proportional to class support."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(targets).astype(bool)
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
    pred = s >= threshold
    support = y.sum(axis=0)
    if support.sum() == 0:
        raise UndefinedMetricError("weighted_f1 needs at least one positive label")
    tp = np.sum(pred & y, axis=0)
    fp = np.sum(pred & ~y, axis=0)
    fn = np.sum(~pred & y, axis=0)
    denom = 2 * tp + fp + fn
    per = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    keep = support > 0
    return float(np.sum(per[keep] * support[keep]) / support[keep].sum())


def recall_at_k(scores, targets, k: int = 10) -> float:
    """Mean over samples with a positive of |top-k ∩ true| / min(|true|, k)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(targets).astype(bool)
    if s.ndim == 1:
        s, y = s[None, :], y[None, :]
    if s.shape[1] < k:
        raise ValueError(f"recall_at_k needs d >= k (d={s.shape[1]}, k={k})")
    vals = []
    for row_s, row_y in zip(s, y):
        n_true = int(row_y.sum())
        if n_true == 0:
            continue
        top = np.argsort(-row_s, kind="stable")[:k]
        vals.append(row_y[top].sum() / min(n_true, k))
    return float(np.mean(vals)) if vals else 0.0


def macro_binary(fn, scores, targets) -> float:
    """Apply a 1-D metric to every label column that it is defined on, then average."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(targets)
    if s.ndim == 1 or s.shape[1] == 1:
        return fn(s.ravel(), y.ravel())
    vals = []
    for j in range(s.shape[1]):
        try:
            vals.append(fn(s[:, j], y[:, j]))
        except UndefinedMetricError:
            continue
    if not vals:
        raise UndefinedMetricError("no label column has both classes")
    return float(np.mean(vals))


TASK_METRICS = {
    "mortality": ("auprc", "auroc", "f1"),
    "readmission": ("auprc", "auroc", "f1"),
    "drug": ("auprc", "f1"),
    "diagnosis": ("weighted_f1", "recall@10"),
}


def evaluate(scores, targets, kind: str, threshold: float = 0.5, k: int = 10) -> dict[str, float]:
    """Metric dictionary for a task kind; undefined metrics come back as NaN."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(targets)
    if s.ndim == 1:
        s = s[:, None]
        y = y.reshape(-1, 1)
    out = {}
    for name in TASK_METRICS[kind]:
        try:
            if name == "auroc":
                out[name] = macro_binary(auroc, s, y)
            elif name == "auprc":
                out[name] = macro_binary(auprc, s, y)
            elif name == "f1":
                out[name] = f1_binary(s[:, 0] if s.shape[1] == 1 else s, y[:, 0] if y.shape[1] == 1 else y, threshold)
            elif name == "weighted_f1":
                out[name] = weighted_f1(s, y, threshold)
            elif name == "recall@10":
                out[name] = recall_at_k(s, y, min(k, s.shape[1]))
        except UndefinedMetricError:
            out[name] = float("nan")
    return out
