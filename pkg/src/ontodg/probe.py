"""Linear probes on the decomposed embeddings and the domain-recovery diagnostic.

A probe is a logistic regression fitted on dimension-wise standardized
embeddings, one binary probe per target column. Two probe families are
compared by the cosine similarity of their weight vectors, averaged over
classes.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import adjusted_mutual_info_score

from .pruning import cohort_ids

logger = logging.getLogger(__name__)

ROWS = (
    ("W(p->labels) vs W(h->labels)", "p", "labels", "h", "labels"),
    ("W(p->domains) vs W(r~->domains)", "p", "domains", "r_par", "domains"),
    ("W(p->labels) vs W(p->domains)", "p", "labels", "p", "domains"),
)


def standardize(X: np.ndarray, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Center and scale each column to unit standard deviation.

    Returns the scaled matrix and a boolean mask of kept columns;
    zero-variance columns are zeroed out and reported once.
    """
    X = np.asarray(X, dtype=float)
    sd = X.std(axis=0)
    keep = sd > tol
    if not keep.all():
        logger.warning("dropping %d zero-variance dimension(s) before probing", int((~keep).sum()))
    Z = np.zeros_like(X)
    Z[:, keep] = (X[:, keep] - X[:, keep].mean(axis=0)) / sd[keep]
    return Z, keep


PROBE_C = 1e-4


def fit_probes(X: np.ndarray, Y: np.ndarray, seed: int = 0, C: float = PROBE_C) -> np.ndarray:
    """Weights ``(n_classes, dim)`` of one logistic probe per column of ``Y``.

    The default penalty is strong on purpose: weights then follow the
    standardized class-mean differences instead of splitting arbitrarily
    across collinear dimensions (the parallel component ``r~`` is low rank).

    Columns with a single observed class give a NaN row. Dropped
    (zero-variance) dimensions get weight 0.
    """
    Z, keep = standardize(X)
    Y = np.asarray(Y)
    if Y.ndim == 1:
        Y = Y[:, None]
    W = np.full((Y.shape[1], Z.shape[1]), np.nan)
    if not keep.any():
        return W
    for j in range(Y.shape[1]):
        y = Y[:, j]
        if len(np.unique(y)) < 2:
            continue
        clf = LogisticRegression(C=C, max_iter=2000, random_state=seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            clf.fit(Z[:, keep], y)
        W[j] = 0.0
        W[j, keep] = clf.coef_[0]
    return W


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def weight_cosine(Wa: np.ndarray, Wb: np.ndarray, paired: bool) -> float:
    """Mean (signed) cosine between probe weights.

    ``paired`` compares row i of ``Wa`` with row i of ``Wb`` (same classes);
    otherwise every row of ``Wa`` is compared with every row of ``Wb``.
    NaN rows (single-class targets) are skipped.
    """
    ok_a = ~np.isnan(Wa).any(axis=1)
    ok_b = ~np.isnan(Wb).any(axis=1)
    if paired:
        vals = [_cos(Wa[i], Wb[i]) for i in range(len(Wa)) if ok_a[i] and ok_b[i]]
    else:
        vals = [_cos(a, b) for a in Wa[ok_a] for b in Wb[ok_b]]
    return float(np.mean(vals)) if vals else float("nan")


def linear_probe_cosine(emb_a, target_a, emb_b, target_b, seed: int = 0, C: float = PROBE_C) -> float:
    """Fit probes ``emb_a -> target_a`` and ``emb_b -> target_b`` and compare their weights.

    Weights are compared class by class when both probes predict the same
    target, across all class pairs otherwise.
    """
    Wa = fit_probes(emb_a, target_a, seed, C)
    Wb = fit_probes(emb_b, target_b, seed, C)
    same = target_a is target_b or (
        np.shape(target_a) == np.shape(target_b) and np.array_equal(target_a, target_b)
    )
    return weight_cosine(Wa, Wb, paired=same)


@dataclass
class ProbeRow:
    name: str
    cosine: float


def probe_report(
    embeddings: dict, labels: np.ndarray, domains: np.ndarray, seed: int = 0, C: float = PROBE_C
) -> list[ProbeRow]:
    """The three weight-overlap comparisons.

    ``embeddings`` maps ``"p"``, ``"h"``, ``"r_par"`` to ``(n, dim)`` arrays;
    ``domains`` is the binary lookup matrix (one probe per pruned node).
    Each probe is fitted once and reused across rows.
    """
    targets = {"labels": np.asarray(labels), "domains": np.asarray(domains)}
    cache: dict = {}

    def weights(emb: str, tgt: str) -> np.ndarray:
        if (emb, tgt) not in cache:
            cache[(emb, tgt)] = fit_probes(embeddings[emb], targets[tgt], seed, C)
        return cache[(emb, tgt)]

    rows = []
    for name, ea, ta, eb, tb in ROWS:
        rows.append(ProbeRow(name, weight_cosine(weights(ea, ta), weights(eb, tb), paired=ta == tb)))
    return rows


def format_probe_table(rows: list[ProbeRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'comparison':<{width}}  cosine", "-" * (width + 8)]
    lines += [f"{r.name:<{width}}  {r.cosine:.4f}" for r in rows]
    return "\n".join(lines)


def domain_recovery_ami(M: np.ndarray, hidden: list) -> float:
    """Adjusted mutual information between discovered domain rows and hidden domain labels."""
    if len(M) != len(hidden):
        raise ValueError(f"{len(M)} lookup rows but {len(hidden)} hidden labels")
    return float(adjusted_mutual_info_score(list(hidden), cohort_ids(np.asarray(M))))
