"""Gradient geometry, routing similarity and Integrated-Gradients attribution of the prior biases."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model.network import PriseModel
from .objectives import class_weights, loss_wce
from .signals.synth import Corpus, EegBatch
from .tensor.core import Tensor, backward, no_grad
from .tensor.linalg import svd_topk
from .tensor.rng import RngStream
from .training.checkpoint import model_arrays, restore_model
from .training.optim import AdamW, clip_grad_norm

EPS = 1e-12
D_SKETCH = 256
PARAM_GROUPS = ("tokenizer", "group-attn", "temporal-attn", "moe-ffn", "decoder")


# ---------------------------------------------------------------------------
# CountSketch

class CountSketch:
    """Fixed sparse sign projector R^dim -> R^d_sk; one per parameter group."""

    def __init__(self, dim: int, d_sk: int = D_SKETCH, seed: int = 0, group: str = ""):
        if dim < 1 or d_sk < 1:
            raise ValueError("sketch dimensions must be positive")
        rng = RngStream(seed, f"sketch/{group}")
        self.dim, self.d_sk = dim, d_sk
        self.bucket = rng.integers(0, d_sk, dim)
        self.sign = rng.integers(0, 2, dim) * 2.0 - 1.0

    def __call__(self, grad: np.ndarray) -> np.ndarray:
        g = np.asarray(grad, dtype=np.float64).ravel()
        if g.size != self.dim:
            raise ValueError(f"sketch expects {self.dim} entries, got {g.size}")
        return np.bincount(self.bucket, weights=self.sign * g, minlength=self.d_sk)


# ---------------------------------------------------------------------------
# matrix analytics

def mean_cosine(xi: np.ndarray, xj: np.ndarray, eps: float = EPS) -> float:
    """Cosine between the normalised summed update directions of two (Q, d) streams."""
    ui = np.asarray(xi).sum(0)
    uj = np.asarray(xj).sum(0)
    ui = ui / (np.linalg.norm(ui) + eps)
    uj = uj / (np.linalg.norm(uj) + eps)
    return float(ui @ uj)


def pca_basis(x: np.ndarray, k: int) -> np.ndarray:
    """Orthonormal (d, k) basis of the top-k principal directions of the row-centred stream."""
    x = np.asarray(x, dtype=np.float64)
    if not 1 <= k <= min(x.shape):
        raise ValueError(f"rank k={k} must lie in [1, {min(x.shape)}]")
    xc = x - x.mean(0, keepdims=True)
    u, _ = svd_topk(xc.T, k)
    return u


def subspace_affinity(xi: np.ndarray, xj: np.ndarray, k: int = 7) -> float:
    """Mean singular value of U_i^T U_j, i.e. the mean cosine of the k principal angles."""
    ui, uj = pca_basis(xi, k), pca_basis(xj, k)
    sv = np.linalg.svd(ui.T @ uj, compute_uv=False)
    return float(np.clip(sv, 0.0, 1.0).mean())


def basis_affinity(ui: np.ndarray, uj: np.ndarray) -> float:
    sv = np.linalg.svd(ui.T @ uj, compute_uv=False)
    return float(np.clip(sv, 0.0, 1.0).mean())


def routing_similarity(pi: list[np.ndarray], pj: list[np.ndarray], eps: float = EPS) -> float:
    """Cosine of cumulative expert-usage vectors, averaged over layers."""
    if len(pi) != len(pj) or not pi:
        raise ValueError("routing similarity needs the same non-empty list of layers")
    sims = []
    for a, b in zip(pi, pj):
        a, b = np.asarray(a, float), np.asarray(b, float)
        sims.append(float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + eps)))
    return float(np.mean(sims))


def _symmetric(n: int, fn) -> np.ndarray:
    m = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            m[i, j] = m[j, i] = fn(i, j)
    return m


# ---------------------------------------------------------------------------
# gradient collection

def param_group(name: str, kinds: dict[int, str]) -> str | None:
    """Map a parameter name onto the analysis groups; heads are excluded."""
    if name.startswith("heads."):
        return None
    if ".ffn." in name or name.endswith("norm_ffn.weight") or name.endswith("norm_ffn.bias"):
        return "decoder" if name.startswith("decoder.") else "moe-ffn"
    if name.startswith("decoder."):
        return "decoder"
    if name.startswith("tokenizer."):
        return "tokenizer"
    m = re.match(r"encoder\.(\d+)\.", name)
    if m:
        return "temporal-attn" if kinds[int(m.group(1))] == "temporal" else "group-attn"
    return None


@dataclass
class GradientSketch:
    tasks: list[int]
    groups: list[str]
    streams: dict[tuple[str, int], np.ndarray]          # (group, task) -> (Q, d_sk)
    routing: dict[int, list[np.ndarray]]                 # task -> per-encoder-layer cumulative usage
    active: dict[str, bool] = field(default_factory=dict)

    def cosine(self) -> np.ndarray:
        groups = [g for g in self.groups if self.active.get(g, True)]
        n = len(self.tasks)
        per = [_symmetric(n, lambda i, j, g=g: mean_cosine(self.streams[g, self.tasks[i]],
                                                          self.streams[g, self.tasks[j]])) for g in groups]
        return np.mean(per, axis=0)

    def affinity(self, k: int = 7) -> np.ndarray:
        groups = [g for g in self.groups if self.active.get(g, True)]
        n = len(self.tasks)
        per = []
        for g in groups:
            bases = [pca_basis(self.streams[g, t], k) for t in self.tasks]
            per.append(_symmetric(n, lambda i, j: basis_affinity(bases[i], bases[j])))
        return np.mean(per, axis=0)

    def routing_matrix(self) -> np.ndarray:
        n = len(self.tasks)
        return _symmetric(n, lambda i, j: routing_similarity(self.routing[self.tasks[i]],
                                                             self.routing[self.tasks[j]]))


def collect_gradients(model: PriseModel, corpus: Corpus, tasks: list[int], n_steps: int = 512,
                      lr: float = 5e-5, batch_size: int = 8, d_sk: int = D_SKETCH, seed: int = 0,
                      tau: float = 0.1) -> GradientSketch:
    """Sketch Q consecutive single-task gradients per dataset, each run restarting from the same weights."""
    kinds = {i: layer.kind for i, layer in enumerate(model.encoder)}
    named = list(model.named_parameters())
    members: dict[str, list[int]] = {g: [] for g in PARAM_GROUPS}
    for i, (n, _) in enumerate(named):
        g = param_group(n, kinds)
        if g is not None:
            members[g].append(i)
    groups = [g for g in PARAM_GROUPS if members[g]]
    dims = {g: sum(named[i][1].data.size for i in members[g]) for g in groups}
    sketches = {g: CountSketch(dims[g], d_sk, seed, g) for g in groups}
    start = {k: v.copy() for k, v in model_arrays(model).items()}
    n_tok = model.cfg.n_tokenizer_blocks
    streams, routing, active = {}, {}, {g: False for g in groups}
    train = corpus.split("train")
    root = RngStream(seed, "gradients")
    for t in tasks:
        restore_model(model, start)
        opt = AdamW(named, 0.0)
        idx = np.flatnonzero(train.dataset_id == t)
        w = class_weights(train.label[idx], corpus.n_classes(t))
        rows = {g: np.zeros((n_steps, d_sk)) for g in groups}
        usage = [np.zeros(layer.ffn.spec.n_experts) for layer in model.encoder]
        model.train()
        rng = root.child(f"task{t}")
        for q in range(n_steps):
            sel = np.sort(idx[rng.child(q).choice(len(idx), min(batch_size, len(idx)))])
            b = train.subset(sel)
            model.zero_grad()
            fwd = model.encode(b.signal, b.channel_names, "finetune", domains=b.dataset_id, tau=tau,
                               rng=rng.child(f"fwd{q}"))
            loss = loss_wce(model.classify(fwd.h, t), b.label, w)
            backward(loss)
            for g in groups:
                flat = np.concatenate([named[i][1].grad.ravel() if named[i][1].grad is not None
                                       else np.zeros(named[i][1].data.size) for i in members[g]])
                if np.any(flat):
                    active[g] = True
                rows[g][q] = sketches[g](flat)
            for layer_i, st in enumerate(fwd.stats[n_tok:]):
                usage[layer_i] += st.counts
            clip_grad_norm(model.parameters(), 1.0)
            opt.step(lr)
        for g in groups:
            streams[g, t] = rows[g]
        routing[t] = usage
    restore_model(model, start)
    return GradientSketch(list(tasks), groups, streams, routing, active)


def write_matrix(path, names: list[str], m: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + names)
        for name, row in zip(names, m):
            w.writerow([name] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# Integrated Gradients over the prior biases

@dataclass
class Attribution:
    names: list[str]
    paths: list[str]
    scores: np.ndarray
    total_ig: float                 # signed sum of all IG values (completeness check)
    logit_gap: float                # F(input) - F(baseline)

    def ranked(self) -> list[tuple[str, str, float, int]]:
        order = np.argsort(-self.scores, kind="stable")
        return [(self.names[i], self.paths[i], float(self.scores[i]), r + 1) for r, i in enumerate(order)]

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["group_name", "path", "score", "rank"])
            for name, kind, score, rank in self.ranked():
                w.writerow([name, kind, repr(score), rank])


def _target_logit(model: PriseModel, batch: EegBatch, dataset_id: int, target: int, alpha: float,
                  static_full: np.ndarray | None, dyn_full: np.ndarray | None):
    """Forward with both biases replaced by alpha-scaled leaves; returns logit and leaves."""
    leaves = {}

    def transform(static, dyn):
        b, t = dyn.shape[:2]
        s = static_full if static_full is not None else np.broadcast_to(static.data, (b, t) + static.shape).copy()
        d = dyn_full if dyn_full is not None else dyn.data.copy()
        leaves["static_full"], leaves["dyn_full"] = s, d
        leaves["static"] = Tensor(alpha * s, requires_grad=True)
        leaves["dyn"] = Tensor(alpha * d, requires_grad=True)
        return leaves["static"], leaves["dyn"]

    fwd = model.encode(batch.signal, batch.channel_names, "finetune", domains=batch.dataset_id,
                       bias_transform=transform)
    logits = model.classify(fwd.h, dataset_id)
    return logits[:, target].sum(), leaves, fwd.tokens.selection


def integrated_gradients(model: PriseModel, batch: EegBatch, dataset_id: int, target: int | None = None,
                         steps: int = 64) -> Attribution:
    """IG of the target logit w.r.t. the static (M_s + relaxation) and dynamic biases, zero baseline.

    Trapezoidal rule on alpha in [0, 1]; |IG| is summed over temporal positions, heads
    (shared bias) and channels. ``batch`` should hold one sample.
    """
    was = model.training
    model.eval()
    if target is None:
        with no_grad():
            fwd = model.encode(batch.signal, batch.channel_names, "finetune", domains=batch.dataset_id)
            target = int(model.classify(fwd.h, dataset_id).data[0].argmax())
    with no_grad():
        f1, leaves, sel = _target_logit(model, batch, dataset_id, target, 1.0, None, None)
        f0, _, _ = _target_logit(model, batch, dataset_id, target, 0.0, leaves["static_full"], leaves["dyn_full"])
    static_full, dyn_full = leaves["static_full"], leaves["dyn_full"]
    g_static = np.zeros_like(static_full)
    g_dyn = np.zeros_like(dyn_full)
    for s in range(steps + 1):
        alpha = s / steps
        wt = 0.5 if s in (0, steps) else 1.0
        model.zero_grad()
        f, lv, _ = _target_logit(model, batch, dataset_id, target, alpha, static_full, dyn_full)
        backward(f)
        g_static += wt * lv["static"].grad
        g_dyn += wt * lv["dyn"].grad
    ig_static = static_full * g_static / steps
    ig_dyn = dyn_full * g_dyn / steps
    model.zero_grad()
    model.train(was)

    table = model.tokenizer.static.table
    names = list(table.names)
    paths = ["static"] * len(names)
    scores = list(np.abs(ig_static).sum(axis=(0, 1, 3)))
    pairs = [f"frames({i},{j})" for i, j in model.tokenizer.dynamic.pairs.tolist()]
    dyn_scores = np.zeros(len(pairs))
    per_slot = np.abs(ig_dyn).sum(axis=-1)                  # (B, T, k)
    index = sel if sel is not None else np.broadcast_to(np.arange(per_slot.shape[-1]), per_slot.shape)
    np.add.at(dyn_scores, np.asarray(index).ravel(), per_slot.ravel())
    names += pairs
    paths += ["dynamic"] * len(pairs)
    scores = np.concatenate([np.array(scores), dyn_scores])
    total = float(ig_static.sum() + ig_dyn.sum())
    return Attribution(names, paths, scores, total, float(f1.data - f0.data))


def group_ranks_first(att: Attribution, group: str) -> bool:
    return att.ranked()[0][0] == group


__all__ = ["CountSketch", "mean_cosine", "pca_basis", "subspace_affinity", "routing_similarity", "GradientSketch",
           "collect_gradients", "write_matrix", "integrated_gradients", "Attribution", "PARAM_GROUPS", "param_group"]
