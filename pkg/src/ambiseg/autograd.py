"""Minimal reverse-mode differentiation on float64 numpy arrays.

Closed primitive set: affine, sigmoid, relu, concat, batch_norm, elementwise
add/mul, reductions, row gather/scatter, neighborhood max, cross entropy, the
contrastive loss, and mean absolute error. No general broadcasting.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class Tensor:
    """Array node in a dynamically built computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def backward(output: Tensor) -> None:
    """Reverse-mode sweep from a scalar output; fills .grad on reachable leaves."""
    if output.data.size != 1:
        raise ValueError("backward requires a scalar output")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    output.grad = np.ones_like(output.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch {a.data.shape} vs {b.data.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)

    return Tensor(a.data + b.data, parents=(a, b), backward=bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul shape mismatch {a.data.shape} vs {b.data.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return Tensor(a.data * b.data, parents=(a, b), backward=bwd)


def scale(x: Tensor, c: float) -> Tensor:
    def bwd(g):
        if x.requires_grad:
            x._accum(g * c)

    return Tensor(x.data * c, parents=(x,), backward=bwd)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w.T + b for a (n, d_in) batch or a single (d_in,) vector."""
    single = x.data.ndim == 1
    xd = x.data[None, :] if single else x.data
    if xd.ndim != 2 or w.data.ndim != 2 or xd.shape[1] != w.data.shape[1]:
        raise ValueError(f"affine shape mismatch x{x.data.shape} w{w.data.shape}")
    if b.data.shape != (w.data.shape[0],):
        raise ValueError(f"affine bias shape {b.data.shape} != ({w.data.shape[0]},)")
    out = xd @ w.data.T + b.data

    def bwd(g):
        g2 = g[None, :] if single else g
        if x.requires_grad:
            gx = g2 @ w.data
            x._accum(gx[0] if single else gx)
        if w.requires_grad:
            w._accum(g2.T @ xd)
        if b.requires_grad:
            b._accum(g2.sum(axis=0))

    return Tensor(out[0] if single else out, parents=(x, w, b), backward=bwd)


def sigmoid(x: Tensor) -> Tensor:
    pos = x.data >= 0
    y = np.empty_like(x.data)
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    y[~pos] = ex / (1.0 + ex)

    def bwd(g):
        if x.requires_grad:
            x._accum(g * y * (1.0 - y))

    return Tensor(y, parents=(x,), backward=bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        if x.requires_grad:
            x._accum(g * mask)

    return Tensor(x.data * mask, parents=(x,), backward=bwd)


def log(x: Tensor) -> Tensor:
    def bwd(g):
        if x.requires_grad:
            x._accum(g / x.data)

    return Tensor(np.log(x.data), parents=(x,), backward=bwd)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def bwd(g):
        if x.requires_grad:
            x._accum(g * y)

    return Tensor(y, parents=(x,), backward=bwd)


def tsum(x: Tensor) -> Tensor:
    def bwd(g):
        if x.requires_grad:
            x._accum(np.full_like(x.data, float(g)))

    return Tensor(np.sum(x.data), parents=(x,), backward=bwd)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size

    def bwd(g):
        if x.requires_grad:
            x._accum(np.full_like(x.data, float(g) / n))

    return Tensor(np.mean(x.data), parents=(x,), backward=bwd)


def concat_cols(parts: list[Tensor]) -> Tensor:
    """Column-wise concatenation of (n, d_i) blocks."""
    widths = [p.data.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def bwd(g):
        off = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p._accum(g[:, off:off + w])
            off += w

    return Tensor(out, parents=tuple(parts), backward=bwd)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        if x.requires_grad:
            acc = np.zeros_like(x.data)
            np.add.at(acc, idx, g)
            x._accum(acc)

    return Tensor(x.data[idx], parents=(x,), backward=bwd)


def neighborhood_max(x: Tensor, groups: int, k: int) -> Tensor:
    """Max over each group of k consecutive rows: (groups*k, d) -> (groups, d)."""
    xd = x.data.reshape(groups, k, -1)
    arg = np.argmax(xd, axis=1)
    out = np.take_along_axis(xd, arg[:, None, :], axis=1)[:, 0, :]

    def bwd(g):
        if x.requires_grad:
            acc = np.zeros_like(xd)
            np.put_along_axis(acc, arg[:, None, :], g[:, None, :], axis=1)
            x._accum(acc.reshape(x.data.shape))

    return Tensor(out, parents=(x,), backward=bwd)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def create(cls, dim: int) -> "BatchNormState":
        return cls(running_mean=np.zeros(dim), running_var=np.ones(dim))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               mode: str = "train", eps: float = 1e-5, momentum: float = 0.9,
               update_running: bool = True) -> Tensor:
    """Batch normalization over axis 0 with learnable scale/shift.

    Train mode uses (clamped) batch statistics and blends them into the running
    stats; infer mode is a pure affine map from the running stats.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    xd = x.data
    if mode == "train":
        mean = xd.mean(axis=0)
        var = xd.var(axis=0)
        if update_running:
            state.running_mean = momentum * state.running_mean + (1 - momentum) * mean
            state.running_var = momentum * state.running_var + (1 - momentum) * var
    else:
        mean = state.running_mean
        var = state.running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    out = gamma.data * xhat + beta.data

    def bwd(g):
        if gamma.requires_grad:
            gamma._accum(np.sum(g * xhat, axis=0))
        if beta.requires_grad:
            beta._accum(np.sum(g, axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            if mode == "train":
                x._accum(inv * (gx - gx.mean(axis=0)
                                - xhat * np.mean(gx * xhat, axis=0)))
            else:
                x._accum(gx * inv)

    return Tensor(out, parents=(x, gamma, beta), backward=bwd)


def cross_entropy(scores: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross entropy against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n = scores.data.shape[0]
    shifted = scores.data - scores.data.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    probs = expv / expv.sum(axis=1, keepdims=True)
    picked = shifted[np.arange(n), labels] - np.log(expv.sum(axis=1))
    out = -np.mean(picked)

    def bwd(g):
        if scores.requires_grad:
            grad = probs.copy()
            grad[np.arange(n), labels] -= 1.0
            scores._accum(float(g) * grad / n)

    return Tensor(out, parents=(scores,), backward=bwd)


def mae(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean absolute error vs a constant target; subgradient at 0 is 0."""
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ValueError(f"mae shape mismatch {pred.data.shape} vs {target.shape}")
    diff = pred.data - target
    out = np.mean(np.abs(diff))

    def bwd(g):
        if pred.requires_grad:
            pred._accum(float(g) * np.sign(diff) / diff.size)

    return Tensor(out, parents=(pred,), backward=bwd)


def contrast_loss(features: Tensor, nbr: np.ndarray, intra: np.ndarray,
                  margins: np.ndarray, tau: float) -> Tensor:
    """Adaptive margin contrastive loss as a graph node.

    The forward value and backward pass both come from the analytic
    implementation in ambiseg.margin; margins are constants.
    """
    from ambiseg.margin import loss_am_indexed

    value, grad_f = loss_am_indexed(features.data, nbr, intra,
                                    np.asarray(margins, dtype=np.float64), tau)

    def bwd(g):
        if features.requires_grad:
            features._accum(float(g) * grad_f)

    return Tensor(value, parents=(features,), backward=bwd)


def weighted_rows(x: Tensor, idx: np.ndarray, weights: np.ndarray) -> Tensor:
    """out_i = sum_h weights_{i,h} * x_{idx_{i,h}} with constant weights."""
    idx = np.asarray(idx, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    out = np.einsum("nh,nhd->nd", w, x.data[idx])

    def bwd(g):
        if x.requires_grad:
            acc = np.zeros_like(x.data)
            np.add.at(acc, idx.ravel(), (w[..., None] * g[:, None, :]).reshape(-1, x.data.shape[1]))
            x._accum(acc)

    return Tensor(out, parents=(x,), backward=bwd)


def weighted_gather_blend(x: Tensor, nbr: np.ndarray, self_coef: np.ndarray,
                          nbr_weights: np.ndarray) -> Tensor:
    """out_i = self_coef_i * x_i + sum_h nbr_weights_{i,h} * x_{nbr_{i,h}}.

    Coefficients are constants (mask logic is not differentiated).
    """
    nbr = np.asarray(nbr, dtype=np.int64)
    sc = np.asarray(self_coef, dtype=np.float64)[:, None]
    w = np.asarray(nbr_weights, dtype=np.float64)
    out = sc * x.data + np.einsum("nh,nhd->nd", w, x.data[nbr])

    def bwd(g):
        if x.requires_grad:
            acc = sc * g
            np.add.at(acc, nbr.ravel(), (w[..., None] * g[:, None, :]).reshape(-1, x.data.shape[1]))
            x._accum(acc)

    return Tensor(out, parents=(x,), backward=bwd)


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_check(f, params, step: float = 1e-5) -> float:
    """Max relative error between analytic gradients of f() and central differences.

    f rebuilds its graph from the live param tensors on every call; the relative
    error denominator is max(1, |analytic|, |numeric|) per coordinate.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError("step must lie in [1e-7, 1e-3]")
    zero_grads(params)
    out = f()
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f().item()
            flat[i] = orig - step
            lo = f().item()
            flat[i] = orig
            num = (hi - lo) / (2.0 * step)
            ana = a.ravel()[i]
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, err)
    return worst
