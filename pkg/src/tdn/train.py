"""Minimal NHWC training engine: forward/backward for every layer kind plus
SGD with momentum, enough to fit desk-scale models and measure accuracy.

Tensors are (batch, height, width, channels) float32 by default; every op
preserves the dtype of its inputs so gradient checks can run the whole
stack in float64. Batch norm uses batch statistics in training mode and
updates running statistics in place with momentum 0.9.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .archdsl import ArchGraph, LayerSpec, TensorShape

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

LEARNABLE_KEYS = ("w", "b", "gamma", "beta")
STATE_KEYS = ("running_mean", "running_var")


class DivergenceError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


@dataclass
class ModelParams:
    """Per-node tensors: w/b plus gamma/beta/running_mean/running_var for BN."""

    tensors: dict[str, dict[str, np.ndarray]]
    seed: int | None = None

    def learnables(self):
        for nid in self.tensors:
            for key in LEARNABLE_KEYS:
                if key in self.tensors[nid]:
                    yield nid, key, self.tensors[nid][key]

    def copy(self) -> "ModelParams":
        return ModelParams(
            tensors={nid: {k: v.copy() for k, v in t.items()} for nid, t in self.tensors.items()},
            seed=self.seed,
        )


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")


def init_params(graph: ArchGraph, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases, identity batch norm; deterministic."""
    if not graph.is_shape_inferred:
        raise ValueError("graph must be shape-inferred")
    rng = np.random.default_rng(seed)
    tensors: dict[str, dict[str, np.ndarray]] = {}

    def glorot(shape, fan_in, fan_out):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=shape).astype(np.float32)

    for node in graph.nodes:
        if node.kind not in ("conv", "dwconv", "dense"):
            continue
        cin = graph.shape_of(node.predecessors[0]).channels
        t: dict[str, np.ndarray] = {}
        if node.kind == "conv":
            k, cout = node.kernel, node.out_channels
            t["w"] = glorot((k, k, cin, cout), k * k * cin, k * k * cout)
            nch = cout
        elif node.kind == "dwconv":
            k = node.kernel
            t["w"] = glorot((k, k, cin), k * k, k * k)
            nch = cin
        else:
            t["w"] = glorot((cin, node.units), cin, node.units)
            t["b"] = np.zeros(node.units, np.float32)
            nch = node.units
        if node.kind != "dense":
            if node.has_bias:
                t["b"] = np.zeros(nch, np.float32)
            if node.batch_norm:
                t["gamma"] = np.ones(nch, np.float32)
                t["beta"] = np.zeros(nch, np.float32)
                t["running_mean"] = np.zeros(nch, np.float32)
                t["running_var"] = np.ones(nch, np.float32)
        tensors[node.id] = t
    return ModelParams(tensors=tensors, seed=seed)


# --------------------------------------------------------------------------
# layer primitives
# --------------------------------------------------------------------------

def same_pads(h: int, w: int, k: int, s: int) -> tuple[int, int, int, int, int, int]:
    """(top, bottom, left, right, out_h, out_w) for ceil-division same padding."""
    oh = -(-h // s)
    ow = -(-w // s)
    ph = max((oh - 1) * s + k - h, 0)
    pw = max((ow - 1) * s + k - w, 0)
    return ph // 2, ph - ph // 2, pw // 2, pw - pw // 2, oh, ow


def conv_pads(shape: TensorShape, node: LayerSpec) -> tuple[int, int, int, int, int, int]:
    h, w, k, s = shape.height, shape.width, node.kernel, node.stride
    if node.padding == "same":
        return same_pads(h, w, k, s)
    return 0, 0, 0, 0, (h - k) // s + 1, (w - k) // s + 1


def _im2col(xp: np.ndarray, k: int, s: int, oh: int, ow: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]
    n = xp.shape[0]
    c = xp.shape[3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, k * k * c)


def _col2im(dcols: np.ndarray, xp_shape, k: int, s: int, oh: int, ow: int) -> np.ndarray:
    n, hp, wp, c = xp_shape
    d = dcols.reshape(n, oh, ow, k, k, c)
    dxp = np.zeros(xp_shape, dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + s * oh : s, j : j + s * ow : s, :] += d[:, :, :, i, j, :]
    return dxp


def _bn_forward_train(z, gamma, beta):
    axes = (0, 1, 2)
    mean = z.mean(axes)
    var = z.var(axes)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (z - mean) * inv
    return gamma * xhat + beta, (xhat, inv), mean, var


def _bn_backward(dout, gamma, cache):
    xhat, inv = cache
    m = dout.shape[0] * dout.shape[1] * dout.shape[2]
    dgamma = (dout * xhat).sum((0, 1, 2))
    dbeta = dout.sum((0, 1, 2))
    dxhat = dout * gamma
    dz = (inv / m) * (m * dxhat - dxhat.sum((0, 1, 2)) - xhat * (dxhat * xhat).sum((0, 1, 2)))
    return dz, dgamma, dbeta


# --------------------------------------------------------------------------
# graph forward / backward
# --------------------------------------------------------------------------

def _forward(graph: ArchGraph, params: ModelParams, x: np.ndarray, training: bool):
    """Outputs and backward caches for every node. In training mode BN uses
    batch statistics and the params' running stats are updated in place."""
    outs: dict[str, np.ndarray] = {}
    caches: dict[str, tuple] = {}
    for node in graph.nodes:
        if node.kind == "input":
            outs[node.id] = x
            continue
        a = outs[node.predecessors[0]]
        t = params.tensors.get(node.id, {})
        if node.kind in ("conv", "dwconv"):
            shp = graph.shape_of(node.predecessors[0])
            pt, pb, pl, pr, oh, ow = conv_pads(shp, node)
            xp = np.pad(a, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else a
            k, s = node.kernel, node.stride
            if node.kind == "conv":
                cols = _im2col(xp, k, s, oh, ow)
                wmat = t["w"].reshape(-1, node.out_channels)
                z = (cols @ wmat).reshape(a.shape[0], oh, ow, node.out_channels)
                cache: dict = {"cols": cols, "xp_shape": xp.shape, "pads": (pt, pb, pl, pr), "oh": oh, "ow": ow}
            else:
                z = np.zeros((a.shape[0], oh, ow, shp.channels), a.dtype)
                for i in range(k):
                    for j in range(k):
                        z += xp[:, i : i + s * oh : s, j : j + s * ow : s, :] * t["w"][i, j]
                cache = {"xp": xp, "pads": (pt, pb, pl, pr), "oh": oh, "ow": ow}
            if node.has_bias:
                z = z + t["b"]
            if node.batch_norm:
                if training:
                    z, bn_cache, mean, var = _bn_forward_train(z, t["gamma"], t["beta"])
                    t["running_mean"][...] = BN_MOMENTUM * t["running_mean"] + (1 - BN_MOMENTUM) * mean
                    t["running_var"][...] = BN_MOMENTUM * t["running_var"] + (1 - BN_MOMENTUM) * var
                    cache["bn"] = bn_cache
                else:
                    inv = 1.0 / np.sqrt(t["running_var"] + BN_EPS)
                    z = t["gamma"] * (z - t["running_mean"]) * inv + t["beta"]
            if node.activation == "relu":
                z = np.maximum(z, 0)
            outs[node.id] = z
            caches[node.id] = cache
        elif node.kind == "maxpool":
            k, s = node.kernel, node.stride
            n, h, w, c = a.shape
            oh, ow = (h - k) // s + 1, (w - k) // s + 1
            win = sliding_window_view(a, (k, k), axis=(1, 2))[:, ::s, ::s]
            flat = win.reshape(n, oh, ow, c, k * k)
            idx = flat.argmax(-1)
            outs[node.id] = np.take_along_axis(flat, idx[..., None], -1)[..., 0]
            caches[node.id] = (idx, a.shape)
        elif node.kind == "gap":
            outs[node.id] = a.mean((1, 2), keepdims=True)
            caches[node.id] = (a.shape,)
        elif node.kind == "add":
            outs[node.id] = a + outs[node.predecessors[1]]
        elif node.kind == "dense":
            n = a.shape[0]
            x2 = a.reshape(n, -1)
            z = x2 @ t["w"] + t["b"]
            if node.activation == "relu":
                z = np.maximum(z, 0)
            outs[node.id] = z.reshape(n, 1, 1, node.units)
            caches[node.id] = (x2, a.shape)
        elif node.kind == "softmax":
            z = a - a.max(-1, keepdims=True)
            e = np.exp(z)
            outs[node.id] = e / e.sum(-1, keepdims=True)
        else:  # pragma: no cover
            raise ValueError(node.kind)
    return outs, caches


def forward_loss(graph: ArchGraph, params: ModelParams, x: np.ndarray, labels: np.ndarray) -> float:
    """Training-mode cross-entropy loss only; does not touch running stats.

    Kept separate so finite-difference oracles can probe the loss surface.
    """
    scratch = params.copy()
    outs, _ = _forward(graph, scratch, x, training=True)
    return float(_ce_from_graph(graph, outs, labels)[0])


def _ce_from_graph(graph: ArchGraph, outs: dict[str, np.ndarray], labels: np.ndarray):
    last = graph.nodes[-1]
    logits_node = last.predecessors[0] if last.kind == "softmax" else last.id
    logits = outs[logits_node].reshape(len(labels), -1)
    z = logits - logits.max(-1, keepdims=True)
    lse = np.log(np.exp(z).sum(-1, keepdims=True))
    logp = z - lse
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    dlogits = (np.exp(logp) - np.eye(logits.shape[1], dtype=logits.dtype)[labels]) / n
    return loss, logits_node, dlogits


def loss_and_grads(graph: ArchGraph, params: ModelParams, x: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and gradients for every learnable tensor.

    Updates BN running statistics in place (training-mode forward). Raises
    :class:`DivergenceError` on a non-finite loss.
    """
    outs, caches = _forward(graph, params, x, training=True)
    loss, logits_node, dlogits = _ce_from_graph(graph, outs, labels)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")

    grads = {nid: {k: np.zeros_like(v) for k, v in t.items() if k in LEARNABLE_KEYS}
             for nid, t in params.tensors.items()}
    gmap: dict[str, np.ndarray] = {logits_node: dlogits.reshape(outs[logits_node].shape)}

    for node in reversed(graph.nodes):
        if node.kind in ("input", "softmax"):
            continue
        g = gmap.pop(node.id, None)
        if g is None:
            continue  # node does not feed the loss
        t = params.tensors.get(node.id, {})
        pred = node.predecessors[0]
        if node.kind in ("conv", "dwconv"):
            cache = caches[node.id]
            out = outs[node.id]
            if node.activation == "relu":
                g = g * (out > 0)
            if node.batch_norm:
                g, dgamma, dbeta = _bn_backward(g, t["gamma"], cache["bn"])
                grads[node.id]["gamma"] += dgamma
                grads[node.id]["beta"] += dbeta
            if node.has_bias:
                grads[node.id]["b"] += g.sum((0, 1, 2))
            pt, pb, pl, pr = cache["pads"]
            k, s, oh, ow = node.kernel, node.stride, cache["oh"], cache["ow"]
            if node.kind == "conv":
                gflat = g.reshape(-1, node.out_channels)
                grads[node.id]["w"] += (cache["cols"].T @ gflat).reshape(t["w"].shape)
                dcols = gflat @ t["w"].reshape(-1, node.out_channels).T
                dxp = _col2im(dcols, cache["xp_shape"], k, s, oh, ow)
            else:
                xp = cache["xp"]
                dxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        sl = np.s_[:, i : i + s * oh : s, j : j + s * ow : s, :]
                        grads[node.id]["w"][i, j] += (g * xp[sl]).sum((0, 1, 2))
                        dxp[sl] += g * t["w"][i, j]
            h, w = graph.shape_of(pred).height, graph.shape_of(pred).width
            da = dxp[:, pt : pt + h, pl : pl + w, :]
        elif node.kind == "maxpool":
            idx, a_shape = caches[node.id]
            k, s = node.kernel, node.stride
            oh, ow = g.shape[1], g.shape[2]
            da = np.zeros(a_shape, g.dtype)
            for p in range(k * k):
                i, j = divmod(p, k)
                da[:, i : i + s * oh : s, j : j + s * ow : s, :] += g * (idx == p)
        elif node.kind == "gap":
            (a_shape,) = caches[node.id]
            da = np.broadcast_to(g / (a_shape[1] * a_shape[2]), a_shape).copy()
        elif node.kind == "add":
            other = node.predecessors[1]
            gmap[other] = gmap.get(other, 0) + g
            da = g
        elif node.kind == "dense":
            x2, a_shape = caches[node.id]
            g2 = g.reshape(len(x2), -1)
            if node.activation == "relu":
                g2 = g2 * (outs[node.id].reshape(len(x2), -1) > 0)
            grads[node.id]["w"] += x2.T @ g2
            grads[node.id]["b"] += g2.sum(0)
            da = (g2 @ t["w"].T).reshape(a_shape)
        else:  # pragma: no cover
            raise ValueError(node.kind)
        gmap[pred] = gmap.get(pred, 0) + da
    return loss, grads


# --------------------------------------------------------------------------
# optimizer and fit loop
# --------------------------------------------------------------------------

def init_opt_state(params: ModelParams) -> dict:
    return {
        nid: {k: np.zeros_like(t[k]) for k in t if k in LEARNABLE_KEYS}
        for nid, t in params.tensors.items()
    }


def sgd_step(params: ModelParams, grads: dict, opt_state: dict, cfg: TrainConfig, lr: float | None = None):
    """v <- momentum*v + g + wd*w;  w <- w - lr*v. Mutates params/opt_state."""
    step_lr = cfg.learning_rate if lr is None else lr
    for nid, key, w in params.learnables():
        v = opt_state[nid][key]
        g = grads[nid][key]
        v *= cfg.momentum
        v += g
        if cfg.weight_decay:
            v += cfg.weight_decay * w
        w -= step_lr * v
    return params, opt_state


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    test_acc: float


@dataclass
class FitResult:
    params: ModelParams
    history: list[EpochStats] = field(default_factory=list)
    diverged: bool = False
    best_acc: float = 0.0
    best_epoch: int = -1


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    factor = 1.0
    if cfg.epochs >= 2 and epoch >= cfg.epochs // 2:
        factor = 0.1
    if cfg.epochs >= 2 and epoch >= (3 * cfg.epochs) // 4:
        factor = 0.01
    return cfg.learning_rate * factor


def fit(graph: ArchGraph, split, cfg: TrainConfig) -> FitResult:
    """Train on split.train, track test accuracy per epoch, return the best
    checkpoint. Deterministic for a fixed cfg.seed in single-threaded use."""
    from .data import images_to_arrays  # local import: data is a peer module

    xtr, ytr = images_to_arrays(split.train)
    if len(xtr) == 0:
        raise ValueError("empty training set")
    params = init_params(graph, cfg.seed)
    opt = init_opt_state(params)
    best = params.copy()
    result = FitResult(params=best)
    if cfg.epochs == 0:
        return result

    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(xtr))
        lr = _lr_at(cfg, epoch)
        total_loss = 0.0
        try:
            for start in range(0, len(order), cfg.batch_size):
                sel = order[start : start + cfg.batch_size]
                xb = xtr[sel]
                if cfg.augment:
                    flips = rng.random((len(sel), 2)) < 0.5
                    xb = xb.copy()
                    for i in range(len(sel)):
                        if flips[i, 0]:
                            xb[i] = xb[i, ::-1]
                        if flips[i, 1]:
                            xb[i] = xb[i, :, ::-1]
                loss, grads = loss_and_grads(graph, params, xb, ytr[sel])
                sgd_step(params, grads, opt, cfg, lr)
                total_loss += loss * len(sel)
        except DivergenceError:
            result.diverged = True
            return result
        acc, _ = evaluate(graph, params, split.test)
        result.history.append(EpochStats(epoch, total_loss / len(xtr), acc))
        if acc > result.best_acc:
            result.best_acc = acc
            result.best_epoch = epoch
            result.params = params.copy()
    return result


def evaluate(graph: ArchGraph, params: ModelParams, test_images, batch_size: int = 256):
    """(accuracy percent, confusion matrix) on the runtime inference path."""
    from .runtime import RuntimeConfig, build_plan, infer
    from .data import images_to_arrays

    if len(test_images) == 0:
        raise ValueError("empty test set")
    x, y = images_to_arrays(test_images)
    plan = build_plan(graph, params, RuntimeConfig())
    num_classes = graph.shape_of(graph.output.id).channels
    confusion = np.zeros((num_classes, num_classes), np.int64)
    for start in range(0, len(x), batch_size):
        probs = infer(plan, x[start : start + batch_size])
        pred = probs.argmax(-1)
        for t, p in zip(y[start : start + batch_size], pred):
            confusion[t, p] += 1
    acc = 100.0 * np.trace(confusion) / confusion.sum()
    return float(acc), confusion
