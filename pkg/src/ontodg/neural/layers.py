"""Dense layers and MLPs.

Every block keeps its parameters in an ordered ``params`` dict and exposes
``forward(...) -> (out, cache)`` and ``backward(cache, grad_out) ->
(grad_in, grads)`` where ``grads`` mirrors ``params``.
"""

from __future__ import annotations

import numpy as np


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


class Dense:
    """``y = x W^T + b`` with ``W`` of shape (out, in)."""

    def __init__(self, n_in: int, n_out: int, g: np.random.Generator, prefix: str = ""):
        bound = 1.0 / np.sqrt(n_in)
        self.prefix = prefix
        self.params = {
            prefix + "weight": g.uniform(-bound, bound, size=(n_out, n_in)),
            prefix + "bias": g.uniform(-bound, bound, size=n_out),
        }

    @property
    def weight(self) -> np.ndarray:
        return self.params[self.prefix + "weight"]

    @property
    def bias(self) -> np.ndarray:
        return self.params[self.prefix + "bias"]

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: np.ndarray):
        if x.shape[-1] != self.n_in:
            raise ValueError(f"Dense expects width {self.n_in}, got {x.shape[-1]}")
        return x @ self.weight.T + self.bias, x

    def backward(self, x: np.ndarray, g: np.ndarray):
        x2 = x.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        grads = {self.prefix + "weight": g2.T @ x2, self.prefix + "bias": g2.sum(axis=0)}
        return g @ self.weight, grads


class MLP:
    """Affine layers with ReLU and inverted dropout between them (none after the last)."""

    def __init__(self, sizes: list[int], g: np.random.Generator, dropout: float = 0.2, prefix: str = "mlp."):
        self.sizes = list(sizes)
        self.dropout = dropout
        self.layers = [Dense(a, b, g, prefix=f"{prefix}{i}.") for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.params = {}
        for layer in self.layers:
            self.params.update(layer.params)

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    def sample_masks(self, batch: int, g: np.random.Generator) -> list[np.ndarray]:
        keep = 1.0 - self.dropout
        return [
            (g.random((batch, layer.n_out)) < keep) / keep
            for layer in self.layers[:-1]
        ]

    def forward(self, x: np.ndarray, train: bool = False, g: np.random.Generator | None = None, masks=None):
        """Forward pass. In training mode dropout masks come from ``masks`` or are drawn from ``g``."""
        if x.shape[-1] != self.n_in:
            raise ValueError(f"MLP expects width {self.n_in}, got {x.shape[-1]}")
        if train and self.dropout > 0 and masks is None:
            if g is None:
                raise ValueError("training-mode forward needs a generator or frozen masks")
            masks = self.sample_masks(x.shape[0], g)
        caches = []
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            z, c = layer.forward(h)
            if i == last:
                caches.append((c, None, None))
                h = z
                break
            a = relu(z)
            m = masks[i] if (train and self.dropout > 0) else None
            if m is not None:
                a = a * m
            caches.append((c, z, m))
            h = a
        return h, caches

    def backward(self, caches, g: np.ndarray):
        grads = {}
        for layer, (c, z, m) in zip(reversed(self.layers), reversed(caches)):
            if z is not None:
                if m is not None:
                    g = g * m
                g = g * (z > 0)
            g, gl = layer.backward(c, g)
            grads.update(gl)
        return g, {k: grads[k] for k in self.params}
