"""Contrastive loss with a weighted margin, and its exact gradients.

For a pair with embedding distance D, pair label l (1 = same class) and
margin weight w (w_bg when a member is the background-noise class, else 1):

    L = l * D^2 + (1 - l) * max(w * m - D, 0)^2

With w = 1 this is the plain margin-m contrastive loss; w > 1 widens the
margin so background ends up farther from event classes than event classes
are from each other.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyBatchError,
    InvalidConfigError,
    InvalidDistanceError,
    ShapeMismatchError,
)


@dataclass(frozen=True)
class LossConfig:
    margin: float = 1.0
    w_bg: float = 2.0

    def __post_init__(self):
        if self.margin <= 0:
            raise InvalidConfigError(f"margin must be positive, got {self.margin}")
        if self.w_bg < 1.0:
            raise InvalidConfigError(f"w_bg must be >= 1, got {self.w_bg}")


# Count of l=0 pairs encountered at exactly D=0, where the repulsive
# direction is undefined and a zero gradient is emitted instead.
_zero_distance_events = 0


def zero_distance_event_count() -> int:
    return _zero_distance_events


def reset_zero_distance_event_count() -> None:
    global _zero_distance_events
    _zero_distance_events = 0


def pair_distance(e1: np.ndarray, e2: np.ndarray) -> float:
    """Euclidean distance between two embedding vectors."""
    e1 = np.asarray(e1)
    e2 = np.asarray(e2)
    if e1.shape != e2.shape:
        raise ShapeMismatchError(f"embedding shapes differ: {e1.shape} vs {e2.shape}")
    return float(np.linalg.norm(e1 - e2))


def weighted_contrastive_loss(d: float, label: int, cfg: LossConfig, w: float = 1.0) -> float:
    if d < 0:
        raise InvalidDistanceError(f"distance must be non-negative, got {d}")
    if label == 1:
        return float(d * d)
    hinge = max(w * cfg.margin - d, 0.0)
    return float(hinge * hinge)


def loss_gradients(
    e1: np.ndarray,
    e2: np.ndarray,
    label: int,
    cfg: LossConfig,
    w: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """dL/de1 and dL/de2 for one pair.

    Same-class pairs attract: dL/de1 = 2 (e1 - e2). Different-class pairs
    inside the weighted margin repel along the difference direction; outside
    the margin (and at the undefined D = 0 point) the gradient is zero.
    """
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e1.shape != e2.shape:
        raise ShapeMismatchError(f"embedding shapes differ: {e1.shape} vs {e2.shape}")
    diff = e1 - e2
    if label == 1:
        g = 2.0 * diff
        return g, -g
    d = float(np.linalg.norm(diff))
    wm = w * cfg.margin
    if d >= wm:
        return np.zeros_like(diff), np.zeros_like(diff)
    if d == 0.0:
        global _zero_distance_events
        _zero_distance_events += 1
        return np.zeros_like(diff), np.zeros_like(diff)
    g = -2.0 * (wm - d) * diff / d
    return g, -g


def batch_objective(pairs, cfg: LossConfig) -> float:
    """Mean weighted contrastive loss over (e1, e2, label, w) tuples."""
    total = 0.0
    count = 0
    for e1, e2, label, w in pairs:
        total += weighted_contrastive_loss(pair_distance(e1, e2), label, cfg, w)
        count += 1
    if count == 0:
        raise EmptyBatchError("batch_objective needs at least one pair")
    return total / count


def batch_loss_and_grads(
    emb1: np.ndarray,
    emb2: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
    cfg: LossConfig,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Vectorized mean loss and its gradients w.r.t. both embedding batches.

    emb1, emb2: (N, dim). Returns (mean_loss, dL/demb1, dL/demb2) with the
    1/N batch-mean factor already applied to the gradients.
    """
    if emb1.shape != emb2.shape:
        raise ShapeMismatchError(f"embedding shapes differ: {emb1.shape} vs {emb2.shape}")
    n = emb1.shape[0]
    if n == 0:
        raise EmptyBatchError("empty embedding batch")
    labels = np.asarray(labels)
    weights = np.asarray(weights)
    diff = emb1.astype(np.float64) - emb2.astype(np.float64)
    d = np.linalg.norm(diff, axis=1)
    wm = weights * cfg.margin
    hinge = np.maximum(wm - d, 0.0)
    per_pair = np.where(labels == 1, d * d, hinge * hinge)
    loss = float(per_pair.mean())

    same = labels == 1
    coef = np.zeros(n)
    coef[same] = 2.0
    active = (~same) & (hinge > 0.0) & (d > 0.0)
    coef[active] = -2.0 * hinge[active] / d[active]
    if np.any((~same) & (hinge > 0.0) & (d == 0.0)):
        global _zero_distance_events
        _zero_distance_events += int(np.sum((~same) & (hinge > 0.0) & (d == 0.0)))
    g1 = (coef / n)[:, None] * diff
    return loss, g1, -g1
