"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class GradReport:
    errors: dict = field(default_factory=dict)  # block name -> max relative error
    tolerance: float = 1e-6

    @property
    def failed(self) -> list[str]:
        return [k for k, e in self.errors.items() if not e <= self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.failed

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Max absolute difference scaled by the block's largest gradient magnitude.

    The scale never drops below ``floor`` so that blocks whose true gradient
    is identically zero (e.g. the attention key bias) are judged on absolute
    finite-difference noise.
    """
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0), floor)
    return float(np.max(np.abs(a - n)) / scale)


def grad_check(
    loss_and_grads: Callable[[], tuple[float, dict]],
    params: dict,
    tolerance: float = 1e-6,
    step: float = 1e-5,
    max_entries: int | None = 200,
    seed: int = 0,
    blocks: list[str] | None = None,
) -> GradReport:
    """Compare ``loss_and_grads()`` gradients against central differences.

    ``params`` are perturbed in place (and restored). Any randomness inside
    the closure, e.g. dropout, must be frozen by the caller. Blocks larger
    than ``max_entries`` are checked on a seeded random subset of entries.
    """
    _, grads = loss_and_grads()
    report = GradReport(tolerance=tolerance)
    g = np.random.default_rng(seed)
    for name in blocks or list(params):
        arr = params[name]
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(g.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + step
            up, _ = loss_and_grads()
            flat[i] = old - step
            down, _ = loss_and_grads()
            flat[i] = old
            numeric[j] = (up - down) / (2 * step)
        report.errors[name] = relative_error(grads[name].reshape(-1)[idx], numeric)
    return report
