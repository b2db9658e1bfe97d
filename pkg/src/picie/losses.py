"""Prototype clustering losses, their within/cross-view composition,
overclustering balance, per-cluster weighting, and the parametric
cross-entropy used by the modified-DeepCluster baseline.

Centroids are constants here: gradients flow only into the feature vectors.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import torch
from torch.nn import functional as F

from picie.errors import ConfigError, NumericalError


@dataclasses.dataclass(frozen=True)
class BalanceCoefficients:
    lam_k1: float
    lam_k2: float


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """1 - a.b for unit vectors; in [0, 2], zero iff a == b."""
    if not (torch.isfinite(a).all() and torch.isfinite(b).all()):
        raise NumericalError("non-finite input to cosine_distance")
    return 1.0 - (a * b).sum(dim=-1)


def _pixels(z: torch.Tensor) -> torch.Tensor:
    """Flatten a feature grid to N x D (accepts N x D, D,H,W or B,D,H,W)."""
    if z.dim() == 2:
        return z
    if z.dim() == 3:
        return z.permute(1, 2, 0).reshape(-1, z.shape[0])
    if z.dim() == 4:
        return z.permute(0, 2, 3, 1).reshape(-1, z.shape[1])
    raise ConfigError(f"cannot interpret feature tensor with {z.dim()} dims")


def _as_centroid_tensor(c, like: torch.Tensor) -> torch.Tensor:
    matrix = getattr(c, "matrix", c)
    if isinstance(matrix, np.ndarray):
        matrix = torch.from_numpy(matrix)
    return matrix.detach().to(like.dtype)


def prototype_logits(z: torch.Tensor, centroids) -> torch.Tensor:
    """Negative cosine distance to every prototype: logits of Eq. softmax."""
    zp = _pixels(z)
    c = _as_centroid_tensor(centroids, zp)
    return zp @ c.T - 1.0


def prototype_posteriors(z: torch.Tensor, centroids) -> torch.Tensor:
    """Softmax over negative distances; rows sum to 1."""
    return torch.softmax(prototype_logits(z, centroids), dim=-1)


def l_clust(z: torch.Tensor, y, centroids, weights=None) -> torch.Tensor:
    """Per-pixel prototype cross-entropy w_y * (-log softmax(-d)[y]).

    ``z`` may be a single D vector (scalar result) or a feature grid with a
    matching label grid (per-pixel tensor). Gradients reach ``z`` only.
    """
    single = z.dim() == 1
    if single:
        z = z[None]
    logits = prototype_logits(z, centroids)
    k = logits.shape[1]
    labels = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    if labels.numel() != logits.shape[0]:
        raise ConfigError(
            f"{logits.shape[0]} pixels but {labels.numel()} labels"
        )
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ConfigError(f"labels outside [0, {k})")
    nll = F.cross_entropy(logits, labels, reduction="none")
    if weights is not None:
        w = torch.as_tensor(np.asarray(weights), dtype=logits.dtype)
        nll = nll * w[labels]
    return nll[0] if single else nll


def within_and_cross(z1, z2, labels1, labels2, c1, c2, w1=None, w2=None):
    """Within-view and cross-view prototype losses over aligned grids.

    L_within averages each view against its own labels and centroids;
    L_cross swaps them, pushing both views toward a shared clustering.
    """
    if _pixels(z1).shape != _pixels(z2).shape:
        raise ConfigError(
            f"view shapes differ: {tuple(z1.shape)} vs {tuple(z2.shape)}"
        )
    l_within = l_clust(z1, labels1, c1, w1).mean() + l_clust(z2, labels2, c2, w2).mean()
    l_cross = l_clust(z1, labels2, c2, w2).mean() + l_clust(z2, labels1, c1, w1).mean()
    return l_within, l_cross


def total_loss(l_within: torch.Tensor, l_cross: torch.Tensor) -> torch.Tensor:
    """Average of the within- and cross-view objectives."""
    total = (l_within + l_cross) / 2.0
    value = total if isinstance(total, torch.Tensor) else torch.as_tensor(total)
    if not torch.isfinite(value).all():
        raise NumericalError("non-finite total loss")
    return total


def balance(k1: int, k2: int) -> BalanceCoefficients:
    """Loss weights for joint training with an overclustering head: the
    cross-entropy magnitude grows with log K, so each head is weighted by
    the other's log cluster count. Base-independent; coefficients sum to 1."""
    if k1 <= 1 or k2 <= 1:
        raise ConfigError(f"balance needs K1, K2 >= 2, got ({k1}, {k2})")
    lam1 = math.log(k2) / (math.log(k1) + math.log(k2))
    return BalanceCoefficients(lam_k1=lam1, lam_k2=1.0 - lam1)


def cluster_size_weights(counts, total: int | None = None) -> np.ndarray:
    """Per-cluster weights inversely proportional to cluster size,
    w_k = N / (K * max(n_k, 1)); uniform sizes give all-ones."""
    counts = np.asarray(counts, dtype=np.int64)
    if (counts < 0).any():
        raise ConfigError("cluster counts must be non-negative")
    n_total = int(counts.sum()) if total is None else total
    if total is not None and counts.sum() != total:
        raise ConfigError(f"counts sum to {counts.sum()}, expected {total}")
    k = len(counts)
    return n_total / (k * np.maximum(counts, 1).astype(np.float64))


def parametric_ce(scores: torch.Tensor, y, weights=None) -> torch.Tensor:
    """Softmax cross-entropy over classifier logits (baseline head loss).

    Single K-vector with an int label gives a scalar; an N x K batch with N
    labels gives per-sample losses.
    """
    single = scores.dim() == 1
    if single:
        scores = scores[None]
    labels = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    if labels.numel() and (labels.min() < 0 or labels.max() >= scores.shape[1]):
        raise ConfigError(f"labels outside [0, {scores.shape[1]})")
    nll = F.cross_entropy(scores, labels, reduction="none")
    if weights is not None:
        w = torch.as_tensor(np.asarray(weights), dtype=scores.dtype)
        nll = nll * w[labels]
    return nll[0] if single else nll


def mse_cross_view(z1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    """Mean squared distance between corresponding pixel vectors (the
    direct-matching ablation alternative to the cross-view loss)."""
    p1, p2 = _pixels(z1), _pixels(z2)
    if p1.shape != p2.shape:
        raise ConfigError(f"view shapes differ: {tuple(p1.shape)} vs {tuple(p2.shape)}")
    return ((p1 - p2) ** 2).sum(dim=-1).mean()
