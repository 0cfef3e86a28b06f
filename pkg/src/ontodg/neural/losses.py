"""Losses returning ``(value, gradient)``; all reduce by the mean."""

from __future__ import annotations

import logging

import numpy as np

from .layers import sigmoid

logger = logging.getLogger(__name__)

PROB_CLIP = 1e-7
MMD_FLOOR = 1e-12


def bce_with_logits(logits: np.ndarray, target: np.ndarray):
    """Mean binary cross-entropy over all entries; gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=float)
    y = np.asarray(target, dtype=float)
    if z.shape != y.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {y.shape}")
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(loss.mean()), (sigmoid(z) - y) / z.size


def mse(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=float)
    diff = a - np.asarray(b, dtype=float)
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def mmd_mean(r: np.ndarray, p: np.ndarray):
    """``||mean(r) - mean(p)||^2 / ||mean(p)||^2`` over the batch axis; gradient w.r.t. ``r``."""
    r = np.atleast_2d(np.asarray(r, dtype=float))
    p = np.atleast_2d(np.asarray(p, dtype=float))
    if r.shape[1] != p.shape[1]:
        raise ValueError(f"width mismatch {r.shape[1]} vs {p.shape[1]}")
    diff = r.mean(axis=0) - p.mean(axis=0)
    den = float(np.dot(p.mean(axis=0), p.mean(axis=0)))
    if den < MMD_FLOOR:
        logger.warning("mmd: batch mean of p has norm below 1e-12, denominator clamped")
        den = MMD_FLOOR
    loss = float(np.dot(diff, diff) / den)
    grad = np.broadcast_to(2.0 * diff / den / r.shape[0], r.shape).copy()
    return loss, grad


def kl_bernoulli(pred_logits: np.ndarray, ref: np.ndarray):
    """Mean per-label Bernoulli KL(sigmoid(pred_logits) || ref).

    ``ref`` is a constant (no gradient flows into it). Probabilities are
    clipped to [1e-7, 1 - 1e-7]; clipped entries get zero gradient.
    """
    z = np.asarray(pred_logits, dtype=float)
    raw = sigmoid(z)
    p = np.clip(raw, PROB_CLIP, 1 - PROB_CLIP)
    q = np.clip(np.asarray(ref, dtype=float), PROB_CLIP, 1 - PROB_CLIP)
    kl = p * np.log(p / q) + (1 - p) * np.log((1 - p) / (1 - q))
    dp = np.log(p / (1 - p)) - np.log(q / (1 - q))
    inside = (raw > PROB_CLIP) & (raw < 1 - PROB_CLIP)
    grad = np.where(inside, dp * p * (1 - p), 0.0) / z.size
    return float(kl.mean()), grad


def kl_bernoulli_prob(pred: np.ndarray, ref: np.ndarray) -> float:
    p = np.clip(np.asarray(pred, dtype=float), PROB_CLIP, 1 - PROB_CLIP)
    q = np.clip(np.asarray(ref, dtype=float), PROB_CLIP, 1 - PROB_CLIP)
    return float(np.mean(p * np.log(p / q) + (1 - p) * np.log((1 - p) / (1 - q))))
