"""Per-point ambiguity from local label geometry.

A point whose K-neighborhood mixes labels gets an ambiguity in (0, 1] driven by
the gap between its intra-class and inter-class closeness centralities; a pure
neighborhood gives 0 and an isolated anchor (no same-label neighbor but itself)
gives 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ambiseg.cloud import PointCloud, knn, knn_all


@dataclass(frozen=True)
class AefConfig:
    k: int = 24
    beta: float = 0.04
    dup_epsilon: float = 1e-9

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("K must be >= 2")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if not 0 < self.dup_epsilon <= 1e-6:
            raise ValueError("dup_epsilon must lie in (0, 1e-6]")


@dataclass(frozen=True)
class NeighborPartition:
    """K-neighborhood split by label equality with the anchor.

    d_plus / d_minus are squared-distance sums over the intra / inter sets;
    the anchor contributes a zero term to d_plus.
    """

    anchor: int
    intra: np.ndarray
    inter: np.ndarray
    d_plus: float
    d_minus: float


@dataclass(frozen=True)
class Closeness:
    cc_plus: float
    cc_minus: float


@dataclass(frozen=True)
class AmbiguityMap:
    values: np.ndarray
    stage: int = 0


def partition_neighbors(cloud: PointCloud, anchor: int, k: int) -> NeighborPartition:
    """Split the anchor's K-neighborhood into intra/inter sets with distance sums."""
    nb = knn(cloud, anchor, k).neighbors
    d2 = np.sum((cloud.positions[nb] - cloud.positions[anchor]) ** 2, axis=1)
    same = cloud.labels[nb] == cloud.labels[anchor]
    return NeighborPartition(
        anchor=anchor,
        intra=nb[same],
        inter=nb[~same],
        d_plus=float(np.sum(d2 * same)),
        d_minus=float(np.sum(d2 * ~same)),
    )


def closeness(part: NeighborPartition, dup_epsilon: float = 1e-9) -> Closeness:
    """Count-over-squared-distance compactness for the intra and inter sets."""
    cc_plus = len(part.intra) / max(part.d_plus, dup_epsilon)
    if len(part.inter) == 0:
        cc_minus = 0.0
    else:
        cc_minus = len(part.inter) / max(part.d_minus, dup_epsilon)
    return Closeness(cc_plus=cc_plus, cc_minus=cc_minus)


def ambiguity(cc: Closeness, intra_count: int, k: int, beta: float) -> float:
    """Piecewise ambiguity: 0 for pure neighborhoods, 1 for isolated anchors,
    otherwise an inverse sigmoid of the closeness gap."""
    if not 1 <= intra_count <= k:
        raise ValueError("intra_count must lie in [1, K]")
    if intra_count == k:
        return 0.0
    if intra_count == 1:
        return 1.0
    with np.errstate(over="ignore"):  # huge closeness gaps saturate to 0
        return float(1.0 / (1.0 + np.exp(beta * (cc.cc_plus - cc.cc_minus))))


def ambiguity_map(cloud: PointCloud, cfg: AefConfig, stage: int = 0) -> AmbiguityMap:
    """Ambiguity for every point; vectorized but bit-equal to the per-point path."""
    if cfg.k > cloud.n:
        raise ValueError(f"K={cfg.k} exceeds point count {cloud.n}")
    nbrs = knn_all(cloud.positions, cfg.k)
    diffs = cloud.positions[nbrs] - cloud.positions[:, None, :]
    d2 = np.sum(diffs ** 2, axis=2)
    same = cloud.labels[nbrs] == cloud.labels[:, None]
    n_plus = same.sum(axis=1)
    n_minus = cfg.k - n_plus
    d_plus = np.sum(d2 * same, axis=1)
    d_minus = np.sum(d2 * ~same, axis=1)
    cc_plus = n_plus / np.maximum(d_plus, cfg.dup_epsilon)
    cc_minus = np.where(n_minus == 0, 0.0, n_minus / np.maximum(d_minus, cfg.dup_epsilon))
    with np.errstate(over="ignore"):  # huge closeness gaps saturate to 0
        mid = 1.0 / (1.0 + np.exp(cfg.beta * (cc_plus - cc_minus)))
    values = np.where(n_plus == cfg.k, 0.0, np.where(n_plus == 1, 1.0, mid))
    return AmbiguityMap(values=values, stage=stage)
