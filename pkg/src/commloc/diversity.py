"""Diversity measures over a user's community structure and influence mix.

community_entropy quantifies how evenly a user's friends are spread over
communities (Renyi entropy of the size distribution; high alpha emphasizes the
dominant community).  influence_entropy quantifies how evenly a user's
check-ins are attributed across influential communities (Shannon entropy of
the attribution counts).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_ALPHA = 10.0


def community_entropy(sizes: Sequence[int], alpha: float = DEFAULT_ALPHA) -> float:
    """Renyi entropy, in nats, of community sizes normalized by their total.

    Parameters
    ----------
    sizes : positive community sizes for one user's ego partition.
    alpha : Renyi order; must be > 0 and != 1 (see community_entropy_shannon
            for the alpha -> 1 limit).

    H_alpha = (1 / (1 - alpha)) * ln( sum_c (|c| / total)^alpha )
    """
    if alpha <= 0.0 or alpha == 1.0:
        raise ValueError(f"alpha must be positive and != 1, got {alpha}")
    if not len(sizes):
        raise ValueError("community_entropy needs at least one community")
    arr = np.asarray(sizes, dtype=float)
    if np.any(arr <= 0):
        raise ValueError("community sizes must be positive")
    p = arr / arr.sum()
    return float(np.log(np.sum(p**alpha)) / (1.0 - alpha))


def community_entropy_shannon(sizes: Sequence[int]) -> float:
    """Shannon entropy (nats) of normalized community sizes: the alpha->1 limit."""
    if not len(sizes):
        raise ValueError("community_entropy_shannon needs at least one community")
    arr = np.asarray(sizes, dtype=float)
    if np.any(arr <= 0):
        raise ValueError("community sizes must be positive")
    p = arr / arr.sum()
    return float(-np.sum(p * np.log(p)))


@dataclass
class InfluenceProfile:
    """Per-community attribution counts of one user's check-ins.

    counts[c] is how many of the user's check-ins had community c as the
    nearest (influential) community; length matches the user's partition.
    """

    owner: str
    counts: list[int]

    @property
    def total(self) -> int:
        return int(sum(self.counts))

    @property
    def n_influential(self) -> int:
        return int(sum(1 for c in self.counts if c > 0))

    def is_zero(self) -> bool:
        return self.total == 0


def influence_entropy(counts: Sequence[int] | InfluenceProfile) -> float:
    """Shannon entropy, in nats, of influential-community attribution counts.

    Zero counts contribute nothing (0 ln 0 := 0); an all-zero profile has no
    distribution to measure and raises ValueError.
    """
    if isinstance(counts, InfluenceProfile):
        counts = counts.counts
    arr = np.asarray(counts, dtype=float)
    if arr.size == 0 or np.any(arr < 0):
        raise ValueError("counts must be a non-empty, non-negative vector")
    total = arr.sum()
    if total == 0:
        raise ValueError("influence_entropy is undefined for an all-zero profile")
    p = arr[arr > 0] / total
    return float(-np.sum(p * np.log(p)))


def influence_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    """Cosine similarity between two influence count vectors of equal length."""
    va = np.asarray(a, dtype=float)
    vb = np.asarray(b, dtype=float)
    if va.shape != vb.shape or va.ndim != 1 or va.size == 0:
        raise ValueError("influence vectors must be non-empty and the same length")
    na = math.sqrt(float(va @ va))
    nb = math.sqrt(float(vb @ vb))
    if na == 0.0 or nb == 0.0:
        raise ValueError("influence_similarity is undefined for a zero vector")
    return float(va @ vb) / (na * nb)


def pearson_correlation(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation coefficient of two equal-length sequences."""
    vx = np.asarray(x, dtype=float)
    vy = np.asarray(y, dtype=float)
    if vx.shape != vy.shape or vx.ndim != 1:
        raise ValueError("inputs must be equal-length 1-d sequences")
    if vx.size < 2:
        raise ValueError("pearson_correlation needs at least two observations")
    dx = vx - vx.mean()
    dy = vy - vy.mean()
    sx = float(dx @ dx)
    sy = float(dy @ dy)
    if sx == 0.0 or sy == 0.0:
        raise ValueError("pearson_correlation is undefined for a constant sequence")
    return float(dx @ dy) / math.sqrt(sx * sy)
