"""Small numpy networks with hand-written backward passes (float64 throughout)."""

from .layers import MLP, Dense, relu, sigmoid
from .losses import bce_with_logits, kl_bernoulli, mmd_mean, mse
from .optim import Adam

__all__ = ["Dense", "MLP", "relu", "sigmoid", "bce_with_logits", "mse", "mmd_mean", "kl_bernoulli", "Adam"]
