"""Finite-difference verification of every differentiable objective."""
from __future__ import annotations

import numpy as np

from ambiseg import autograd as ag
from ambiseg.ambiguity import NeighborPartition
from ambiseg.apm import block_forward, concat_input, init_apm_block, loss_reg
from ambiseg.cloud import PointCloud
from ambiseg.config import Config
from ambiseg.margin import _neighbor_matrix
from ambiseg.network import SegModel, build_geometry, forward, loss_joint


def random_batch(rng: np.random.Generator, n: int = 12, dim: int = 5, k: int = 4,
                 num_classes: int = 3):
    """Random features plus label-consistent neighbor partitions."""
    feats = rng.normal(size=(n, dim))
    labels = rng.integers(0, num_classes, size=n)
    margins = rng.uniform(-0.5, 0.5, size=n)
    parts = []
    for i in range(n):
        others = np.delete(np.arange(n), i)
        nbr = np.concatenate([[i], rng.choice(others, size=k - 1, replace=False)])
        same = labels[nbr] == labels[i]
        parts.append(NeighborPartition(anchor=i, intra=nbr[same], inter=nbr[~same],
                                       d_plus=0.0, d_minus=0.0))
    return feats, parts, margins, labels


def check_loss_am(seed: int, tau: float = 0.3, step: float = 1e-5) -> float:
    rng = np.random.default_rng(seed)
    feats, parts, margins, _ = random_batch(rng)
    nbr, intra = _neighbor_matrix(parts)
    f = ag.Tensor(feats, requires_grad=True)
    return ag.finite_diff_check(lambda: ag.contrast_loss(f, nbr, intra, margins, tau), [f], step)


def check_loss_reg(seed: int, step: float = 1e-5) -> float:
    rng = np.random.default_rng(seed)
    n, d = 10, 4
    block = init_apm_block(1, d, rng)
    z = concat_input(rng.normal(size=(n, 3)), rng.normal(size=(n, d)))
    target = rng.uniform(0.05, 0.95, size=n)

    def f():
        pred = block_forward(z, block, mode="train", update_running=False)
        return loss_reg(pred, target)

    # avoid the |.| kink: nudge targets away from near-zero residuals
    resid = np.abs(block_forward(z, block, mode="train", update_running=False).data[:, 0] - target)
    target = np.where(resid < 1e-6, target + 1e-3, target)
    return ag.finite_diff_check(f, block.parameters(), step)


def check_loss_ce(seed: int, step: float = 1e-5) -> float:
    rng = np.random.default_rng(seed)
    n, c = 16, 4
    scores = ag.Tensor(rng.normal(size=(n, c)), requires_grad=True)
    labels = rng.integers(0, c, size=n)
    return ag.finite_diff_check(lambda: ag.cross_entropy(scores, labels), [scores], step)


def _tiny_cloud(rng: np.random.Generator, n: int = 48, num_classes: int = 2) -> PointCloud:
    positions = rng.normal(size=(n, 3))
    labels = (positions[:, 0] > 0).astype(np.int64) % num_classes
    return PointCloud(positions, labels, num_classes)


def check_joint(seed: int, step: float = 1e-5) -> float:
    """Total objective of a reduced model against central differences."""
    rng = np.random.default_rng(seed)
    # apm_detach=False: the detached variant stops gradients by design, which a
    # finite-difference probe cannot represent; the coupled flag makes the
    # whole objective differentiable end to end.
    cfg = Config(k=6, k_tilde=4, stages=2, dims=(4, 6), seed=seed,
                 epsilon_lo=0.9, epsilon_hi=1.0, apm_detach=False)
    cloud = _tiny_cloud(rng)
    model = SegModel(cfg, feat_dim0=3, num_classes=2)
    geometry = build_geometry(cloud, cfg, with_labels=True)

    def f():
        result = forward(model, cloud, mode="train", geometry=geometry,
                         update_running=False)
        total, _ = loss_joint(model, result, cloud.labels)
        return total

    return ag.finite_diff_check(f, model.parameters(), step)


def run_gradcheck(seed: int = 0, verbose: bool = False) -> float:
    checks = [
        ("loss_am", check_loss_am(seed)),
        ("loss_reg", check_loss_reg(seed + 1)),
        ("loss_ce", check_loss_ce(seed + 2)),
        ("joint", check_joint(seed + 3)),
    ]
    worst = 0.0
    for name, err in checks:
        if verbose:
            print(f"{name}: max relative error {err:.3e}")
        worst = max(worst, err)
    return worst
