"""Point-cloud containers, neighbor search, sampling, transforms, synthetic scenes."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

# Brute-force neighbor search below this point count, kd-tree above.
# Both paths obey the same (distance, index) tie rule and agree exactly.
KDTREE_CUTOFF = 4096

SCENE_KINDS = ("two-rooms", "planar-boundary", "checker-columns")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    """Immutable labeled point set.

    positions: (n, 3) float64, labels: (n,) int64 in [0, num_classes),
    features: optional (n, D) float64.
    """

    positions: np.ndarray
    labels: np.ndarray
    num_classes: int
    features: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        lab = np.asarray(self.labels, dtype=np.int64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be (n, 3), got {pos.shape}")
        n = pos.shape[0]
        if n < 1:
            raise ValueError("point cloud must contain at least one point")
        if lab.shape != (n,):
            raise ValueError(f"labels must be ({n},), got {lab.shape}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if lab.min() < 0 or lab.max() >= self.num_classes:
            raise ValueError("labels must lie in [0, num_classes)")
        object.__setattr__(self, "positions", _readonly(pos))
        object.__setattr__(self, "labels", _readonly(lab))
        if self.features is not None:
            feat = np.asarray(self.features, dtype=np.float64)
            if feat.ndim != 2 or feat.shape[0] != n:
                raise ValueError(f"features must be ({n}, D), got {feat.shape}")
            object.__setattr__(self, "features", _readonly(feat))

    @property
    def n(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class NeighborList:
    """K nearest neighbors of an anchor, sorted by (squared distance, index)."""

    anchor: int
    neighbors: np.ndarray


@dataclass(frozen=True)
class SceneSpec:
    kind: str
    points_per_class: int = 256
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}, expected one of {SCENE_KINDS}")
        if self.points_per_class < 8:
            raise ValueError("points_per_class must be >= 8")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def _select_k(d2: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest entries of d2, ties broken by ascending index."""
    n = d2.shape[0]
    if k == n:
        cand = np.arange(n)
    else:
        kth = np.partition(d2, k - 1)[k - 1]
        cand = np.nonzero(d2 <= kth)[0]
    order = np.lexsort((cand, d2[cand]))
    return cand[order][:k]


def knn_indices(positions: np.ndarray, anchor: int, k: int, tree: cKDTree | None = None) -> np.ndarray:
    """K nearest point indices to positions[anchor] by (squared distance, index)."""
    n = positions.shape[0]
    if not 0 <= anchor < n:
        raise ValueError(f"anchor {anchor} out of range for {n} points")
    if not 1 <= k <= n:
        raise ValueError(f"K={k} must satisfy 1 <= K <= n={n}")
    p = positions[anchor]
    if n <= KDTREE_CUTOFF and tree is None:
        d2 = np.sum((positions - p) ** 2, axis=1)
        return _select_k(d2, k)
    if tree is None:
        tree = cKDTree(positions)
    dist, _ = tree.query(p, k=k)
    r = float(np.max(np.atleast_1d(dist)))
    # Inflate the radius slightly so boundary ties survive metric rounding,
    # then re-rank candidates with the exact brute-force rule.
    cand = np.asarray(sorted(tree.query_ball_point(p, r * (1 + 1e-9) + 1e-300)), dtype=np.int64)
    d2 = np.sum((positions[cand] - p) ** 2, axis=1)
    order = np.lexsort((cand, d2))
    return cand[order][:k]


def knn(cloud: PointCloud, anchor: int, k: int) -> NeighborList:
    """K nearest neighbors of a point, anchor included, ties by ascending index."""
    idx = knn_indices(cloud.positions, anchor, k)
    return NeighborList(anchor=anchor, neighbors=idx)


def knn_all(positions: np.ndarray, k: int) -> np.ndarray:
    """(n, k) neighbor index matrix for every point, same rule as knn()."""
    n = positions.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"K={k} must satisfy 1 <= K <= n={n}")
    out = np.empty((n, k), dtype=np.int64)
    if n <= KDTREE_CUTOFF:
        for i in range(n):
            d2 = np.sum((positions - positions[i]) ** 2, axis=1)
            out[i] = _select_k(d2, k)
    else:
        tree = cKDTree(positions)
        for i in range(n):
            out[i] = knn_indices(positions, i, k, tree=tree)
    return out


def fps(cloud: PointCloud, m: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; ties by ascending index."""
    return fps_indices(cloud.positions, m, start)


def fps_indices(positions: np.ndarray, m: int, start: int = 0) -> np.ndarray:
    n = positions.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"m={m} must satisfy 1 <= m <= n={n}")
    if not 0 <= start < n:
        raise ValueError(f"start {start} out of range for {n} points")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    mind2 = np.sum((positions - positions[start]) ** 2, axis=1)
    for t in range(1, m):
        nxt = int(np.argmax(mind2))  # argmax picks the lowest tied index
        chosen[t] = nxt
        np.minimum(mind2, np.sum((positions - positions[nxt]) ** 2, axis=1), out=mind2)
    return chosen


def rigid_transform(cloud: PointCloud, rotation: np.ndarray, translation: np.ndarray) -> PointCloud:
    """Apply p -> R p + t; features and labels are untouched."""
    rot = np.asarray(rotation, dtype=np.float64)
    t = np.asarray(translation, dtype=np.float64).reshape(3)
    if rot.shape != (3, 3):
        raise ValueError("rotation must be 3x3")
    if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-9:
        raise ValueError("rotation is not orthonormal within 1e-9")
    pos = cloud.positions @ rot.T + t
    return PointCloud(pos, cloud.labels, cloud.num_classes, cloud.features)


def _planar_lattice(ppc: int, step: float) -> tuple[np.ndarray, np.ndarray]:
    """Two classes on opposite sides of the x=0 plane, mirrored cubic lattice."""
    side = max(2, math.ceil(ppc ** (1.0 / 3.0)))
    pts = []
    count = 0
    i = 0
    while count < ppc:
        for iy in range(side):
            for iz in range(side):
                if count >= ppc:
                    break
                pts.append(((i + 0.5) * step, iy * step, iz * step))
                count += 1
            if count >= ppc:
                break
        i += 1
    half = np.asarray(pts, dtype=np.float64)
    neg = half.copy()
    neg[:, 0] = -neg[:, 0]
    positions = np.vstack([neg, half])
    labels = np.concatenate([np.zeros(ppc, dtype=np.int64), np.ones(ppc, dtype=np.int64)])
    return positions, labels


def _two_rooms(ppc: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two room boxes plus a shared floor slab: classes {0, 1, 2}."""
    room_a = rng.uniform([0.0, 0.0, 0.0], [2.0, 2.0, 2.0], size=(ppc, 3))
    room_b = rng.uniform([3.0, 0.0, 0.0], [5.0, 2.0, 2.0], size=(ppc, 3))
    floor = rng.uniform([0.0, 0.0, -0.3], [5.0, 2.0, 0.0], size=(ppc, 3))
    positions = np.vstack([room_a, room_b, floor])
    labels = np.repeat(np.arange(3, dtype=np.int64), ppc)
    return positions, labels


def _checker_columns(ppc: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """4x4 grid of vertical columns, class = cell parity."""
    cells = [(i, j) for i in range(4) for j in range(4)]
    positions = np.zeros((2 * ppc, 3), dtype=np.float64)
    labels = np.empty(2 * ppc, dtype=np.int64)
    per_class_cells = {0: [c for c in cells if (c[0] + c[1]) % 2 == 0],
                       1: [c for c in cells if (c[0] + c[1]) % 2 == 1]}
    row = 0
    for cls in (0, 1):
        cols = per_class_cells[cls]
        for t in range(ppc):
            ci, cj = cols[t % len(cols)]
            ang = rng.uniform(0.0, 2.0 * np.pi)
            rad = 0.3 * np.sqrt(rng.uniform())
            h = rng.uniform(0.0, 2.0)
            positions[row] = (ci + 0.5 + rad * np.cos(ang), cj + 0.5 + rad * np.sin(ang), h)
            labels[row] = cls
            row += 1
    return positions, labels


def synth_scene(spec: SceneSpec) -> PointCloud:
    """Deterministic labeled scene with known class boundaries."""
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "planar-boundary":
        positions, labels = _planar_lattice(spec.points_per_class, step=PLANAR_STEP)
        num_classes = 2
    elif spec.kind == "two-rooms":
        positions, labels = _two_rooms(spec.points_per_class, rng)
        num_classes = 3
    else:
        positions, labels = _checker_columns(spec.points_per_class, rng)
        num_classes = 2
    if spec.noise_sigma > 0:
        positions = positions + rng.normal(0.0, spec.noise_sigma, size=positions.shape)
    return PointCloud(positions, labels, num_classes)


# Lattice spacing of the planar-boundary scene; the first slab sits at +-step/2.
PLANAR_STEP = 0.2
