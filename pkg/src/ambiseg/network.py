"""Simplified set-abstraction encoder-decoder with the joint training objective.

Encoder stages downsample by farthest point sampling and aggregate neighbor
features with a shared MLP + max pool; decoder stages upsample by nearest
neighbor and fuse skip features. Contrastive, regression, and cross-entropy
objectives combine into one differentiable total.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ambiseg import autograd as ag
from ambiseg.ambiguity import AefConfig, ambiguity_map
from ambiseg.apm import ApmBlock, block_forward, concat_input, init_apm_block, loss_reg
from ambiseg.cloud import PointCloud, fps_indices, knn_all
from ambiseg.config import Config
from ambiseg.margin import MarginConfig, margin_map
from ambiseg.refine import RefineConfig, build_masks

DOWNSAMPLE_RATIO = 0.25
HEAD_HIDDEN = 16


@dataclass
class LossReport:
    l_ce: float
    l_am: list[float]
    l_reg: list[float]
    l_seg: float
    l_total: float


@dataclass
class StageState:
    stage: int
    point_indices: np.ndarray
    positions: np.ndarray
    labels: np.ndarray | None
    features: np.ndarray | None = None
    ambiguities: np.ndarray | None = None
    margins: np.ndarray | None = None
    predicted: np.ndarray | None = None


@dataclass
class StageGeometry:
    indices: np.ndarray          # into the parent stage's point list
    positions: np.ndarray
    labels: np.ndarray | None
    enc_nbr: np.ndarray          # (n_s, K_enc) neighbor rows in the parent stage
    up_idx: np.ndarray           # (n_parent, 3) nearest stage points per parent point
    up_w: np.ndarray             # (n_parent, 3) inverse-distance upsample weights
    mr_nbr: np.ndarray           # (n_s, k_tilde - 1), anchor excluded
    ambiguities: np.ndarray | None = None
    margins: np.ndarray | None = None
    nbr_matrix: np.ndarray | None = None   # (n_s, K_aef) for the contrast loss
    intra_mask: np.ndarray | None = None


def mine_labels(parent_labels: np.ndarray, sampled_indices: np.ndarray) -> np.ndarray:
    """Sampled points inherit the label of their source point."""
    parent_labels = np.asarray(parent_labels)
    idx = np.asarray(sampled_indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= parent_labels.shape[0]):
        raise ValueError("sampled index out of parent range")
    return parent_labels[idx]


class LinearBN:
    """affine -> batch norm -> activation unit."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        from ambiseg.apm import glorot_uniform
        self.w = ag.Tensor(glorot_uniform(rng, d_out, d_in), requires_grad=True)
        self.b = ag.Tensor(np.zeros(d_out), requires_grad=True)
        self.gamma = ag.Tensor(np.ones(d_out), requires_grad=True)
        self.beta = ag.Tensor(np.zeros(d_out), requires_grad=True)
        self.bn = ag.BatchNormState.create(d_out)

    def __call__(self, x: ag.Tensor, mode: str, update_running: bool, act: str = "relu") -> ag.Tensor:
        y = ag.affine(x, self.w, self.b)
        y = ag.batch_norm(y, self.gamma, self.beta, self.bn, mode=mode,
                          update_running=update_running)
        return ag.relu(y) if act == "relu" else y

    def parameters(self):
        return [self.w, self.b, self.gamma, self.beta]

    def named_arrays(self, prefix: str):
        return {
            f"{prefix}.w": self.w.data,
            f"{prefix}.b": self.b.data,
            f"{prefix}.gamma": self.gamma.data,
            f"{prefix}.beta": self.beta.data,
            f"{prefix}.running_mean": self.bn.running_mean,
            f"{prefix}.running_var": self.bn.running_var,
        }


class SegModel:
    """Stage-structured segmentation network plus per-stage ambiguity regressors."""

    def __init__(self, cfg: Config, feat_dim0: int, num_classes: int):
        cfg.validate()
        self.cfg = cfg
        self.feat_dim0 = feat_dim0
        self.num_classes = num_classes
        rng = np.random.default_rng(cfg.seed)
        dims = (feat_dim0,) + tuple(cfg.dims)
        self.enc = [LinearBN(3 + dims[s - 1], dims[s], rng) for s in range(1, cfg.stages + 1)]
        self.dec = [LinearBN(dims[s + 1] + dims[s], dims[s], rng) for s in range(1, cfg.stages)]
        self.head_hidden = LinearBN(dims[1] + feat_dim0, HEAD_HIDDEN, rng)
        from ambiseg.apm import glorot_uniform
        self.head_w = ag.Tensor(glorot_uniform(rng, num_classes, HEAD_HIDDEN), requires_grad=True)
        self.head_b = ag.Tensor(np.zeros(num_classes), requires_grad=True)
        self.apm = [init_apm_block(s, cfg.dims[s - 1], rng) for s in range(1, cfg.stages + 1)]

    def parameters(self) -> list[ag.Tensor]:
        out = []
        for blk in self.enc + self.dec + [self.head_hidden]:
            out.extend(blk.parameters())
        out.extend([self.head_w, self.head_b])
        for b in self.apm:
            out.extend(b.parameters())
        return out

    def named_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for s, blk in enumerate(self.enc, start=1):
            out.update(blk.named_arrays(f"enc{s}"))
        for s, blk in enumerate(self.dec, start=1):
            out.update(blk.named_arrays(f"dec{s}"))
        out.update(self.head_hidden.named_arrays("head_hidden"))
        out["head.w"] = self.head_w.data
        out["head.b"] = self.head_b.data
        for s, b in enumerate(self.apm, start=1):
            out.update(b.named_arrays(f"apm{s}"))
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.named_arrays()
        if set(own) != set(arrays):
            missing = set(own) ^ set(arrays)
            raise ValueError(f"checkpoint parameter names do not match: {sorted(missing)[:5]}")
        for name, arr in own.items():
            src = np.asarray(arrays[name], dtype=np.float64)
            if src.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {arr.shape}")
            arr[...] = src


def _stage_sizes(n0: int, cfg: Config) -> list[int]:
    sizes = []
    n = n0
    floor = max(cfg.k_tilde, 8)
    for _ in range(cfg.stages):
        n = max(min(floor, n), int(round(n * DOWNSAMPLE_RATIO)))
        sizes.append(n)
    return sizes


def build_geometry(cloud: PointCloud, cfg: Config, with_labels: bool) -> list[StageGeometry]:
    """Static per-cloud structure: sampling, neighborhoods, ambiguities, margins."""
    sizes = _stage_sizes(cloud.n, cfg)
    mcfg = MarginConfig(mu=cfg.mu, nu=cfg.nu, tau=cfg.tau)
    geoms: list[StageGeometry] = []
    parent_pos = cloud.positions
    parent_lab = cloud.labels if with_labels else None
    for s in range(1, cfg.stages + 1):
        n_s = sizes[s - 1]
        idx = fps_indices(parent_pos, n_s, start=0)
        pos = parent_pos[idx]
        lab = mine_labels(parent_lab, idx) if parent_lab is not None else None
        k_enc = min(cfg.k, parent_pos.shape[0])
        enc_nbr = np.empty((n_s, k_enc), dtype=np.int64)
        for row, center in enumerate(pos):
            d2 = np.sum((parent_pos - center) ** 2, axis=1)
            enc_nbr[row] = np.lexsort((np.arange(d2.size), d2))[:k_enc]
        up_d2 = (np.sum(parent_pos ** 2, axis=1)[:, None]
                 - 2.0 * parent_pos @ pos.T + np.sum(pos ** 2, axis=1)[None, :])
        # 3-NN inverse-squared-distance interpolation weights
        k_up = min(3, n_s)
        up_idx = np.argsort(up_d2, axis=1, kind="stable")[:, :k_up]
        up_d2_sel = np.take_along_axis(up_d2, up_idx, axis=1)
        inv = 1.0 / np.maximum(up_d2_sel, 1e-12)
        up_w = inv / inv.sum(axis=1, keepdims=True)
        kt = min(cfg.k_tilde, n_s)
        mr_nbr = knn_all(pos, kt)[:, 1:]
        geo = StageGeometry(indices=idx, positions=pos, labels=lab,
                            enc_nbr=enc_nbr, up_idx=up_idx, up_w=up_w, mr_nbr=mr_nbr)
        if lab is not None:
            stage_cloud = PointCloud(pos, lab, cloud.num_classes)
            k_aef = min(cfg.k, n_s)
            amb = ambiguity_map(stage_cloud, AefConfig(k=k_aef, beta=cfg.beta), stage=s)
            geo.ambiguities = amb.values
            geo.margins = margin_map(amb, mcfg).values
            nbrs = knn_all(pos, k_aef)
            geo.nbr_matrix = nbrs
            geo.intra_mask = lab[nbrs] == lab[:, None]
        geoms.append(geo)
        parent_pos, parent_lab = pos, lab
    return geoms


@dataclass
class ForwardResult:
    scores: ag.Tensor
    stage_feats: dict[int, ag.Tensor]        # decoder-side features per stage
    apm_train_out: dict[int, ag.Tensor]
    pred_amb: dict[int, np.ndarray]          # infer-mode predictions (constants)
    geometry: list[StageGeometry]
    stages: list[StageState]


def forward(model: SegModel, cloud: PointCloud, mode: str = "train",
            geometry: list[StageGeometry] | None = None, update_running: bool | None = None,
            use_refine: bool = True) -> ForwardResult:
    """Full network pass; train mode also evaluates AEF targets and APM outputs."""
    cfg = model.cfg
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if update_running is None:
        update_running = mode == "train"
    if geometry is None:
        geometry = build_geometry(cloud, cfg, with_labels=mode == "train")
    f0 = cloud.features if cloud.features is not None else cloud.positions
    if f0.shape[1] != model.feat_dim0:
        raise ValueError(f"initial feature dim {f0.shape[1]} != model dim {model.feat_dim0}")
    feats0 = ag.Tensor(f0)

    refine_cfg = RefineConfig(epsilon_lo=cfg.epsilon_lo, epsilon_hi=cfg.epsilon_hi,
                              gamma=cfg.gamma, k_tilde=cfg.k_tilde,
                              cross_mask_mode=cfg.cross_mask_mode)

    # encoder
    enc_feats: dict[int, ag.Tensor] = {}
    parent_pos, parent_feats = cloud.positions, feats0
    for s in range(1, cfg.stages + 1):
        geo = geometry[s - 1]
        n_s, k_enc = geo.enc_nbr.shape
        rel = (parent_pos[geo.enc_nbr] - geo.positions[:, None, :]).reshape(-1, 3)
        nbr_feats = ag.gather_rows(parent_feats, geo.enc_nbr.ravel())
        inp = ag.concat_cols([ag.Tensor(rel), nbr_feats])
        h = model.enc[s - 1](inp, mode, update_running)
        enc_feats[s] = ag.neighborhood_max(h, n_s, k_enc)
        parent_pos, parent_feats = geo.positions, enc_feats[s]

    # ambiguity regressors: train-mode outputs for the loss, infer-mode
    # running-stat outputs for masked refinement
    apm_train_out: dict[int, ag.Tensor] = {}
    pred_amb: dict[int, np.ndarray] = {}
    for s in range(1, cfg.stages + 1):
        geo = geometry[s - 1]
        block = model.apm[s - 1]
        z_np = concat_input(geo.positions, enc_feats[s].data)
        if mode == "train":
            if cfg.apm_detach:
                z = ag.Tensor(z_np)
            else:
                z = ag.concat_cols([ag.Tensor(geo.positions), enc_feats[s]])
            apm_train_out[s] = block_forward(z, block, mode="train",
                                             update_running=update_running)
        pred_amb[s] = block_forward(z_np, block, mode="infer",
                                    update_running=False).data[:, 0]

    def maybe_refine(t: ag.Tensor, s: int) -> ag.Tensor:
        if not use_refine or cfg.gamma == 0.0:
            return t
        geo = geometry[s - 1]
        masks = build_masks(pred_amb[s], geo.mr_nbr, refine_cfg)
        if not masks.self_mask.any():
            return t
        sm = masks.self_mask.astype(np.float64)
        self_coef = 1.0 - cfg.gamma * sm
        nbr_weights = cfg.gamma * sm[:, None] * masks.cross_mask
        return ag.weighted_gather_blend(t, geo.mr_nbr, self_coef, nbr_weights)

    # decoder
    stage_feats: dict[int, ag.Tensor] = {}
    g = maybe_refine(enc_feats[cfg.stages], cfg.stages)
    stage_feats[cfg.stages] = g
    for s in range(cfg.stages - 1, 0, -1):
        geo_child = geometry[s]          # stage s+1 geometry holds up_idx for stage s
        up = ag.weighted_rows(g, geo_child.up_idx, geo_child.up_w)
        x = ag.concat_cols([up, enc_feats[s]])
        g = model.dec[s - 1](x, mode, update_running)
        g = maybe_refine(g, s)
        stage_feats[s] = g

    up0 = ag.weighted_rows(g, geometry[0].up_idx, geometry[0].up_w)
    head_in = ag.concat_cols([up0, feats0])
    hidden = model.head_hidden(head_in, mode, update_running)
    scores = ag.affine(hidden, model.head_w, model.head_b)

    states = []
    for s in range(1, cfg.stages + 1):
        geo = geometry[s - 1]
        states.append(StageState(stage=s, point_indices=geo.indices, positions=geo.positions,
                                 labels=geo.labels, features=stage_feats[s].data,
                                 ambiguities=geo.ambiguities, margins=geo.margins,
                                 predicted=pred_amb[s]))
    return ForwardResult(scores=scores, stage_feats=stage_feats, apm_train_out=apm_train_out,
                         pred_amb=pred_amb, geometry=geometry, stages=states)


def loss_joint(model: SegModel, result: ForwardResult, labels: np.ndarray) -> tuple[ag.Tensor, LossReport]:
    """Assemble the total objective from the forward result."""
    cfg = model.cfg
    l_ce = ag.cross_entropy(result.scores, labels)
    l_am_terms: list[ag.Tensor] = []
    l_reg_terms: list[ag.Tensor] = []
    for s in range(1, cfg.stages + 1):
        geo = result.geometry[s - 1]
        l_am_terms.append(ag.contrast_loss(result.stage_feats[s], geo.nbr_matrix,
                                           geo.intra_mask, geo.margins, cfg.tau))
        l_reg_terms.append(loss_reg(result.apm_train_out[s], geo.ambiguities))
    total = ag.scale(l_ce, cfg.lam)
    for t in l_am_terms:
        total = ag.add(total, ag.scale(t, 1.0 - cfg.lam))
    l_seg_val = total.item()
    for t in l_reg_terms:
        total = ag.add(total, ag.scale(t, cfg.omega))
    report = LossReport(
        l_ce=l_ce.item(),
        l_am=[t.item() for t in l_am_terms],
        l_reg=[t.item() for t in l_reg_terms],
        l_seg=l_seg_val,
        l_total=total.item(),
    )
    return total, report


def train(model: SegModel, clouds: list[PointCloud], epochs: int | None = None,
          steps_per_epoch: int = 1) -> list[LossReport]:
    """Momentum SGD with cosine learning-rate decay; deterministic per seed."""
    cfg = model.cfg
    if not clouds:
        raise ValueError("training dataset must be non-empty")
    epochs = cfg.epochs if epochs is None else epochs
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    geometries = [build_geometry(c, cfg, with_labels=True) for c in clouds]
    history: list[LossReport] = []
    total_epochs = max(epochs, 1)
    for epoch in range(epochs):
        lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))
        last_report = None
        for cloud, geometry in zip(clouds, geometries):
            for _ in range(steps_per_epoch):
                ag.zero_grads(params)
                result = forward(model, cloud, mode="train", geometry=geometry)
                total, report = loss_joint(model, result, cloud.labels)
                if not np.isfinite(report.l_total):
                    raise RuntimeError(
                        f"training diverged at epoch {epoch}: total loss {report.l_total}")
                ag.backward(total)
                for p, v in zip(params, velocity):
                    if p.grad is not None:
                        v *= 0.9
                        v += p.grad
                        p.data -= lr * v
                last_report = report
        history.append(last_report)
    return history


def predict(model: SegModel, cloud: PointCloud,
            geometry: list[StageGeometry] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Argmax class labels plus per-point stage-1 predicted ambiguity."""
    if geometry is None:
        geometry = build_geometry(cloud, model.cfg, with_labels=False)
    result = forward(model, cloud, mode="infer", geometry=geometry)
    labels = np.argmax(result.scores.data, axis=1)  # argmax tie -> lowest class
    amb = result.pred_amb[1][geometry[0].up_idx[:, 0]]  # nearest stage-1 point
    return labels, amb
