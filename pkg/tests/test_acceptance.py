"""End-to-end acceptance checks, one per criterion, each printing a verdict."""
import dataclasses
import math
import time

import numpy as np
import pytest

from ambiseg import autograd as ag
from ambiseg import cli
from ambiseg import cloud as cl
from ambiseg import io as aio
from ambiseg.ambiguity import AefConfig, AmbiguityMap, NeighborPartition, ambiguity_map
from ambiseg.apm import block_forward, concat_input, init_apm_block, loss_reg
from ambiseg.cloud import PointCloud, SceneSpec, synth_scene
from ambiseg.config import Config
from ambiseg.gradcheck import run_gradcheck
from ambiseg.margin import ContrastBatch, MarginConfig, MarginMap, loss_am, margin
from ambiseg.network import SegModel, build_geometry, forward, train
from ambiseg.refine import RefineConfig, build_masks, cross_mask, refine_stage
from ambiseg.apm import PredictedAmbiguity


def report(num, name, ok, detail=""):
    verdict = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"criterion {num} [{name}]: {verdict}{suffix}")
    assert ok, f"criterion {num} [{name}] failed{suffix}"


def toy_scene(seed):
    return synth_scene(SceneSpec("planar-boundary", points_per_class=1000,
                                 noise_sigma=0.02, seed=seed))


@pytest.fixture(scope="session")
def overfit_run():
    """Full-size training run shared by the overfit and regression criteria."""
    cloud = toy_scene(seed=0)
    cfg = Config(seed=0)
    model = SegModel(cfg, feat_dim0=3, num_classes=cloud.num_classes)
    start = time.perf_counter()
    history = train(model, [cloud], epochs=200, steps_per_epoch=12)
    elapsed = time.perf_counter() - start
    return cloud, cfg, model, history, elapsed


def brute_ambiguity_oracle(positions, labels, k, beta, dup_epsilon=1e-9):
    """O(n^2) per-point reference; a stable value sort realizes the
    (distance, ascending index) tie rule, and the masked sums keep the same
    reduction order as the library so equality can be exact."""
    n = positions.shape[0]
    out = np.empty(n)
    for i in range(n):
        d2 = np.sum((positions - positions[i]) ** 2, axis=1)
        nb = np.argsort(d2, kind="stable")[:k]
        same = labels[nb] == labels[i]
        n_plus = int(same.sum())
        if n_plus == k:
            out[i] = 0.0
        elif n_plus == 1:
            out[i] = 1.0
        else:
            cc_p = n_plus / max(np.sum(d2[nb] * same), dup_epsilon)
            cc_m = (k - n_plus) / max(np.sum(d2[nb] * ~same), dup_epsilon)
            out[i] = 1.0 / (1.0 + math.exp(beta * (cc_p - cc_m)))
    return out


def test_criterion_01_ambiguity_oracle_equivalence(monkeypatch):
    cfg = AefConfig()
    start = time.perf_counter()
    exact = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        cloud = PointCloud(rng.uniform(0, 4, size=(1000, 3)),
                           rng.integers(0, 3, 1000), 3)
        if seed >= 10:
            # exercise the spatial-index path on the second half
            monkeypatch.setattr(cl, "KDTREE_CUTOFF", 1)
        else:
            monkeypatch.setattr(cl, "KDTREE_CUTOFF", 4096)
        got = ambiguity_map(cloud, cfg).values
        expected = brute_ambiguity_oracle(cloud.positions, cloud.labels,
                                          cfg.k, cfg.beta)
        exact += int(np.array_equal(got, expected))
    elapsed = time.perf_counter() - start
    report(1, "ambiguity oracle equivalence",
           exact == 20 and elapsed < 10.0,
           f"{exact}/20 clouds exact, {elapsed:.1f}s")


def test_criterion_02_ambiguity_spot_values():
    from ambiseg.ambiguity import Closeness, ambiguity
    a = ambiguity(Closeness(cc_plus=2.0, cc_minus=0.25), intra_count=2, k=4, beta=0.04)
    spot_ok = abs(a - 1.0 / (1.0 + math.exp(0.07))) <= 1e-12
    # constructed neighborhoods for both saturation branches
    pos = np.vstack([np.linspace(0, 1, 8)[:, None] @ np.ones((1, 3)), [[0.01, 0, 0]]])
    pure = ambiguity_map(PointCloud(pos, np.zeros(9, dtype=int), 1), AefConfig(k=5))
    lonely_labels = np.array([0] * 8 + [1])
    lonely = ambiguity_map(PointCloud(pos, lonely_labels, 2), AefConfig(k=5))
    branch_ok = np.all(pure.values == 0.0) and lonely.values[8] == 1.0
    report(2, "ambiguity spot values", spot_ok and branch_ok,
           f"a={a!r}")


def test_criterion_03_margin_sign_grid():
    cfg = MarginConfig(mu=-1.0, nu=0.5)
    grid = np.linspace(0.0, 1.0, 10_000)
    ok = margin(0.5, cfg) == 0.0
    for a in grid:
        m = margin(float(a), cfg)
        if a < 0.5:
            ok = ok and (m > 0 or a == 0.5)
        elif a > 0.5:
            ok = ok and m < 0
        else:
            ok = ok and m == 0.0
    report(3, "margin sign over ambiguity grid", ok, "10000 values")


def _random_batch(rng, mu, nu, n=12, dim=5, k=4, num_classes=3):
    feats = rng.normal(size=(n, dim))
    labels = rng.integers(0, num_classes, size=n)
    amb = rng.uniform(0.0, 1.0, size=n)
    parts = []
    for i in range(n):
        others = np.delete(np.arange(n), i)
        nbr = np.concatenate([[i], rng.choice(others, size=k - 1, replace=False)])
        same = labels[nbr] == labels[i]
        parts.append(NeighborPartition(anchor=i, intra=nbr[same], inter=nbr[~same],
                                       d_plus=0.0, d_minus=0.0))
    return ContrastBatch(features=feats, partitions=parts,
                         margins=MarginMap(values=mu * amb + nu),
                         ambiguities=AmbiguityMap(values=amb))


def _plain_supervised_contrast(batch, tau):
    """Independent margin-free supervised contrastive reference."""
    feats = batch.features
    unit = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    total, count = 0.0, 0
    for part in batch.partitions:
        if len(part.inter) == 0:
            continue
        count += 1
        num = sum(math.exp(float(unit[part.anchor] @ unit[j]) / tau) for j in part.intra)
        den = num + sum(math.exp(float(unit[part.anchor] @ unit[j]) / tau)
                        for j in part.inter)
        total += -math.log(num / den)
    return total / count


def test_criterion_04_margin_zero_reduction():
    rng = np.random.default_rng(0)
    cfg = MarginConfig(mu=0.0, nu=0.0)
    worst = 0.0
    for _ in range(100):
        batch = _random_batch(rng, mu=0.0, nu=0.0)
        value, _ = loss_am(batch, cfg)
        worst = max(worst, abs(value - _plain_supervised_contrast(batch, cfg.tau)))
    report(4, "zero-margin reduction to supervised contrast", worst <= 1e-12,
           f"max |diff| {worst:.2e} over 100 batches")


def test_criterion_05_gradient_suite():
    start = time.perf_counter()
    worst = run_gradcheck(seed=0)
    elapsed = time.perf_counter() - start
    report(5, "finite-difference gradient suite",
           worst <= 1e-4 and elapsed < 60.0,
           f"max rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_06_toy_overfit(overfit_run):
    cloud, cfg, model, history, elapsed = overfit_run
    geometry = build_geometry(cloud, cfg, with_labels=True)
    result = forward(model, cloud, mode="infer", geometry=geometry,
                     update_running=False)
    pred = np.argmax(result.scores.data, axis=1)
    oa = float((pred == cloud.labels).mean())
    totals = np.array([h.l_total for h in history])
    ma = np.convolve(totals, np.ones(20) / 20.0, mode="valid")
    ma_ok = bool(np.all(np.diff(ma) <= 1e-9))
    report(6, "toy overfit", oa >= 0.99 and ma_ok and elapsed < 120.0,
           f"OA {100 * oa:.2f}%, 20-epoch MA non-increasing {ma_ok}, {elapsed:.0f}s")


def _ambiguous_bin_accuracy(seed, mu, nu):
    cloud = toy_scene(seed)
    cfg = dataclasses.replace(Config(seed=seed), mu=mu, nu=nu)
    model = SegModel(cfg, feat_dim0=3, num_classes=cloud.num_classes)
    train(model, [cloud], epochs=60, steps_per_epoch=4)
    geometry = build_geometry(cloud, cfg, with_labels=True)
    result = forward(model, cloud, mode="infer", geometry=geometry,
                     update_running=False)
    pred = np.argmax(result.scores.data, axis=1)
    amb = ambiguity_map(cloud, AefConfig(k=cfg.k, beta=cfg.beta)).values
    mask = amb > 0
    return 100.0 * float((pred[mask] == cloud.labels[mask]).mean())


def test_criterion_07_adaptive_beats_constant_margin():
    adaptive = [_ambiguous_bin_accuracy(seed, mu=-1.0, nu=0.5) for seed in range(5)]
    constant = [_ambiguous_bin_accuracy(seed, mu=0.0, nu=0.5) for seed in range(5)]
    med_a = float(np.median(adaptive))
    med_c = float(np.median(constant))
    report(7, "adaptive vs constant margin", med_a >= med_c - 0.5,
           f"median ambiguous-bin accuracy {med_a:.2f}% vs {med_c:.2f}%")


def test_criterion_08_ambiguity_fraction_monotone_in_k():
    cloud = toy_scene(seed=0)
    fractions = [float((ambiguity_map(cloud, AefConfig(k=k)).values > 0).mean())
                 for k in (12, 18, 24, 30)]
    ok = all(a <= b for a, b in zip(fractions, fractions[1:]))
    report(8, "ambiguity fraction non-decreasing in K", ok,
           "fractions " + ", ".join(f"{100 * f:.2f}%" for f in fractions))


def test_criterion_09_apm_regression(overfit_run):
    cloud, cfg, model, _, _ = overfit_run
    geometry = build_geometry(cloud, cfg, with_labels=True)
    result = forward(model, cloud, mode="infer", geometry=geometry,
                     update_running=False)
    feats = result.stage_feats[1].data.copy()
    z = concat_input(geometry[0].positions, feats)
    target = geometry[0].ambiguities
    maes = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        block = init_apm_block(1, feats.shape[1], rng)
        params = block.parameters()
        velocity = [np.zeros_like(p.data) for p in params]
        for _ in range(500):
            ag.zero_grads(params)
            out = block_forward(ag.Tensor(z), block, mode="train", update_running=True)
            ag.backward(loss_reg(out, target))
            for p, v in zip(params, velocity):
                if p.grad is not None:
                    v *= 0.9
                    v += p.grad
                    p.data -= 0.05 * v
        pred = block_forward(z, block, mode="infer", update_running=False).data[:, 0]
        maes.append(float(np.mean(np.abs(pred - target))))
    median = float(np.median(maes))
    report(9, "ambiguity regressor error", median <= 0.1,
           f"median MAE {median:.4f} over 5 seeds")


def test_criterion_10_refinement_invariants():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(64, 8))
    pos = rng.normal(size=(64, 3))
    low = PredictedAmbiguity(values=rng.uniform(0.0, 0.5, size=64), stage=1)
    hot = PredictedAmbiguity(values=rng.uniform(0.85, 1.0, size=64), stage=1)
    out_gamma0, _ = refine_stage(feats, hot, pos, RefineConfig(gamma=0.0, k_tilde=6))
    out_cold, masks_cold = refine_stage(feats, low, pos, RefineConfig(k_tilde=6))
    noop_ok = (np.array_equal(out_gamma0, feats) and np.array_equal(out_cold, feats)
               and not masks_cold.self_mask.any())

    pool_ok, single_ok = True, True
    for _ in range(10_000):
        vals = np.round(rng.uniform(size=7), 1)  # coarse grid forces ties
        pooled, bits = cross_mask(vals, mode="single")
        pool_ok = pool_ok and pooled == min(float(v) for v in vals)
        single_ok = single_ok and bits.sum() == 1 and bits[int(np.argmin(vals))] == 1
    nbr = np.stack([rng.choice(64, size=5, replace=False) for _ in range(64)])
    masks = build_masks(np.round(rng.uniform(size=64), 1), nbr, RefineConfig(k_tilde=6))
    single_ok = single_ok and bool(np.all(masks.cross_mask.sum(axis=1) == 1))
    report(10, "masked refinement invariants", noop_ok and pool_ok and single_ok,
           f"noop {noop_ok}, min-pool {pool_ok}, single-bit {single_ok}")


def test_criterion_11_cli_round_trip(tmp_path):
    scene = tmp_path / "scene.txt"
    csv_out = tmp_path / "amb.csv"
    ply_out = tmp_path / "amb.ply"
    assert cli.main(["synth", "--kind", "planar-boundary", "--points-per-class",
                     "100", "--noise-sigma", "0.02", "--out", str(scene)]) == 0
    assert cli.main(["ambiguity", "--in", str(scene), "--out", str(csv_out),
                     "--ply", str(ply_out)]) == 0
    cloud = aio.read_cloud(scene)
    pos, colors = aio.read_ply(ply_out)
    pos_ok = bool(np.max(np.abs(pos - cloud.positions)) <= 1e-6)
    amb = ambiguity_map(cloud, AefConfig()).values
    color_ok = all(tuple(colors[i]) == aio.ambiguity_color(amb[i])
                   for i in range(cloud.n))

    ckpt_a = tmp_path / "model_a.ckpt"
    ckpt_b = tmp_path / "model_b.ckpt"
    pred_a = tmp_path / "pred_a.csv"
    pred_b = tmp_path / "pred_b.csv"
    tiny = ["--set", "k=8", "--set", "k_tilde=4", "--set", "dims=6,8",
            "--set", "epochs=4"]
    assert cli.main(["train", "--in", str(scene), "--out", str(ckpt_a)] + tiny) == 0
    cfg, arrays, extra = aio.load_checkpoint(ckpt_a)
    aio.save_checkpoint(ckpt_b, cfg, arrays, extra=extra)
    ckpt_ok = ckpt_a.read_bytes() == ckpt_b.read_bytes()
    assert cli.main(["predict", "--in", str(scene), "--checkpoint", str(ckpt_a),
                     "--out", str(pred_a)]) == 0
    assert cli.main(["predict", "--in", str(scene), "--checkpoint", str(ckpt_b),
                     "--out", str(pred_b)]) == 0
    predict_ok = pred_a.read_bytes() == pred_b.read_bytes()
    report(11, "command-line round trip",
           pos_ok and color_ok and ckpt_ok and predict_ok,
           f"positions {pos_ok}, colors {color_ok}, checkpoint {ckpt_ok}, "
           f"predictions {predict_ok}")
