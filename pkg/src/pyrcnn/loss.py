"""Pairwise verification objective: distance, comparator, loss, gradients.

A pair of feature vectors is scored by D = alpha * d(v1, v2) - beta with
alpha = exp(log_alpha) kept positive by construction, and penalized by
softplus(delta * D) where delta is +1 for matched pairs and -1 for
unmatched ones.  Minimizing the loss therefore pulls matched features
together and pushes unmatched ones apart.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class PairLabel(enum.IntEnum):
    MATCHED = 1
    UNMATCHED = -1


@dataclass
class ComparatorParams:
    """Trainable affine comparator; alpha is stored as its logarithm."""

    log_alpha: float = 0.0
    beta: float = 1.0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))


@dataclass
class PairGradients:
    loss: float
    grad_v1: np.ndarray
    grad_v2: np.ndarray
    grad_log_alpha: float
    grad_beta: float


def distance(v1, v2) -> float:
    """Euclidean distance between two equal-length feature vectors."""
    a = np.asarray(v1, dtype=np.float64).reshape(-1)
    b = np.asarray(v2, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(
            f"feature lengths differ: {a.shape[0]} vs {b.shape[0]}"
        )
    return float(np.sqrt(np.sum((a - b) ** 2)))


def comparator(dist: float, params: ComparatorParams) -> float:
    """Match logit D = exp(log_alpha) * dist - beta."""
    return params.alpha * dist - params.beta


def logistic(x: float) -> float:
    # overflow-safe in both tails
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


def pair_loss(D: float, label: PairLabel) -> float:
    """softplus(delta * D), computed as max(x,0) + log1p(exp(-|x|))."""
    x = float(label) * D
    return max(x, 0.0) + float(np.log1p(np.exp(-abs(x))))


def pair_loss_grads(v1, v2, label: PairLabel,
                    params: ComparatorParams) -> PairGradients:
    """Loss value plus analytic gradients w.r.t. both features and (log_alpha, beta).

    At d == 0 the Euclidean norm is not differentiable; the feature
    gradient is defined as zero there (subgradient choice).
    """
    a = np.asarray(v1, dtype=np.float64).reshape(-1)
    b = np.asarray(v2, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(
            f"feature lengths differ: {a.shape[0]} vs {b.shape[0]}"
        )
    delta = float(label)
    d = float(np.sqrt(np.sum((a - b) ** 2)))
    alpha = params.alpha
    D = alpha * d - params.beta
    dL_dD = delta * logistic(delta * D)
    if d > 0.0:
        unit = (a - b) / d
        grad_v1 = dL_dD * alpha * unit
    else:
        grad_v1 = np.zeros_like(a)
    return PairGradients(
        loss=pair_loss(D, label),
        grad_v1=grad_v1,
        grad_v2=-grad_v1,
        grad_log_alpha=dL_dD * d * alpha,
        grad_beta=-dL_dD,
    )
