"""Reconstruction, next-patch, routing-balance and classification losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model.moe import RoutingStats
from .model.tokenizer import psd_db
from .tensor import ops
from .tensor.core import Tensor, as_tensor, no_grad
from .tensor.rng import RngStream

MASK_RATIO = 0.5
AUX_WEIGHT = 1e-5


def n_masked(n: int, ratio: float = MASK_RATIO) -> int:
    """Number of masked positions out of ``n``; halves round up (floor(r*n + 0.5))."""
    return int(math.floor(ratio * n + 0.5))


def reference_targets(signal: np.ndarray, input_scale: float, sample_rate: float) -> np.ndarray:
    """x_ref = [scaled raw patch, dB spectrum] for every (b, t, c): (B,T,C,P + P/2 + 1).

    The dB spectrum is standardised over frequency bins per patch so that it sits on the
    same scale as the raw part instead of being dominated by the stop-band floor.
    """
    x = np.asarray(signal, dtype=np.float64) * input_scale
    with no_grad():
        spec = psd_db(x, sample_rate).data
    spec = (spec - spec.mean(-1, keepdims=True)) / (spec.std(-1, keepdims=True) + 1e-6)
    return np.concatenate([x, spec], axis=-1)


def patch_mask(batch: int, n_patches: int, n_channels: int, rng: RngStream, ratio: float = MASK_RATIO) -> np.ndarray:
    """MAE-TP: whole patches (all channels) masked, ``n_masked(T)`` per sample."""
    k = n_masked(n_patches, ratio)
    mask = np.zeros((batch, n_patches, n_channels), dtype=bool)
    for b in range(batch):
        mask[b, rng.choice(n_patches, k)] = True
    return mask


def channel_mask(batch: int, n_patches: int, n_channels: int, rng: RngStream, ratio: float = MASK_RATIO) -> np.ndarray:
    """MAE-CH: whole channels (all patches) masked, ``n_masked(C)`` per sample."""
    k = n_masked(n_channels, ratio)
    mask = np.zeros((batch, n_patches, n_channels), dtype=bool)
    for b in range(batch):
        mask[b, :, rng.choice(n_channels, k)] = True
    return mask


def loss_mae(pred: Tensor, target: np.ndarray, omega: np.ndarray) -> Tensor:
    """Mean over masked (b, t, c) positions of ||pred - target||_2."""
    omega = np.asarray(omega, dtype=bool)
    count = int(omega.sum())
    if count == 0:
        raise ValueError("mask selects no positions")
    dist = ops.l2norm(pred - target, axis=-1)
    return ops.sum(dist * omega) * (1.0 / count)


def loss_gpt(pred: Tensor, target: np.ndarray) -> Tensor:
    """Output at patch t predicts patch t+1; mean over C(T-1) terms per sample."""
    t = pred.shape[1]
    if t < 2:
        raise ValueError("next-patch loss needs at least two patches")
    dist = ops.l2norm(pred[:, : t - 1] - target[:, 1:], axis=-1)
    return ops.mean(dist)


def loss_aux(stats: list[RoutingStats]) -> Tensor:
    """N * sum_i f_i P_i per MoE layer, averaged over layers (dense layers excluded)."""
    terms = [s.aux_loss() for s in stats if len(s.counts) > 1]
    if not terms:
        return Tensor(0.0)
    return ops.mean(ops.stack(terms))


def class_weights(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Inverse-frequency weights with mean 1 over present classes; absent classes get weight 1."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes).astype(np.float64)
    w = np.ones(n_classes)
    present = counts > 0
    inv = 1.0 / counts[present]
    w[present] = inv / inv.mean()
    return w


def loss_wce(logits: Tensor, labels: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """-(1/N) sum_i w_{y_i} log p(y_i | x_i)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    w = np.ones(c) if weights is None else np.asarray(weights, dtype=np.float64)
    logp = ops.log_softmax(logits, axis=-1)
    picked = logp[np.arange(n), labels]
    return -ops.sum(picked * w[labels]) * (1.0 / n)


@dataclass
class PretrainParts:
    mae_tp: Tensor
    mae_ch: Tensor
    gpt: Tensor
    aux: Tensor
    total: Tensor
    stats: list[RoutingStats]

    def values(self) -> dict:
        return {k: float(getattr(self, k).data) for k in ("total", "mae_tp", "mae_ch", "gpt", "aux")}


def combine_pretrain(mae_tp, mae_ch, gpt, aux, beta: float = AUX_WEIGHT) -> Tensor:
    return (as_tensor(mae_tp) + mae_ch + gpt) * (1.0 / 3.0) + as_tensor(aux) * beta


def pretrain_loss(model, signal: np.ndarray, channel_names, domains, rng: RngStream,
                  beta: float = AUX_WEIGHT, ratio: float = MASK_RATIO) -> PretrainParts:
    """Masked-patch, masked-channel and next-patch objectives plus the routing-balance term."""
    cfg = model.cfg
    b, t, c, _ = signal.shape
    target = reference_targets(signal, cfg.input_scale, cfg.sample_rate)
    stats_all = []
    losses = []
    for name, mask in (("tp", patch_mask(b, t, c, rng.child("mask_tp"), ratio)),
                       ("ch", channel_mask(b, t, c, rng.child("mask_ch"), ratio))):
        fwd = model.encode(signal, channel_names, "pretrain", mask=mask, domains=domains, rng=rng.child(name))
        pred, dec_stats = model.reconstruct(fwd.h, channel_names, domains, rng.child(name))
        losses.append(loss_mae(pred, target, mask))
        stats_all += fwd.stats + dec_stats
    fwd = model.encode(signal, channel_names, "pretrain", domains=domains, causal=True, rng=rng.child("gpt"))
    pred, dec_stats = model.reconstruct(fwd.h, channel_names, domains, rng.child("gpt"))
    gpt = loss_gpt(pred, target)
    stats_all += fwd.stats + dec_stats
    aux = loss_aux(stats_all)
    total = combine_pretrain(losses[0], losses[1], gpt, aux, beta)
    return PretrainParts(losses[0], losses[1], gpt, aux, total, stats_all)


def finetune_loss(model, task_batches: list, rng: RngStream, tau: float, beta: float = AUX_WEIGHT,
                  weights: dict | None = None):
    """Sum of per-task weighted CE over the tasks present in this step, plus beta * aux.

    ``task_batches`` is a list of (dataset_id, EegBatch) processed in dataset-id order.
    Returns (total, per-task losses, logits per task, routing stats).
    """
    total, per_task, logits_out, stats_all = None, {}, {}, []
    for dataset_id, batch in sorted(task_batches, key=lambda p: p[0]):
        domains = np.asarray(batch.dataset_id)
        fwd = model.encode(batch.signal, batch.channel_names, "finetune", domains=domains, tau=tau,
                           rng=rng.child(f"task{dataset_id}"))
        logits = model.classify(fwd.h, dataset_id)
        w = None if weights is None else weights.get(dataset_id)
        loss = loss_wce(logits, batch.label, w)
        per_task[dataset_id] = loss
        logits_out[dataset_id] = logits
        stats_all += fwd.stats
        total = loss if total is None else total + loss
    aux = loss_aux(stats_all)
    return total + aux * beta, per_task, logits_out, stats_all
