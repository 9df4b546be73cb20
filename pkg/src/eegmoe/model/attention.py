"""Multi-head attention with additive logit bias, rotary positions and causal masking."""

from __future__ import annotations

import numpy as np

from ..tensor import ops
from ..tensor.core import Tensor
from ..tensor.nn import Linear, Module
from ..tensor.rng import RngStream

NEG_INF = -1e30


def rope_tables(positions: np.ndarray, dim: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (len(positions), dim) for the rotate-half convention."""
    inv = base ** (-np.arange(0, dim, 2) / dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    ang = np.concatenate([ang, ang], axis=-1)
    return np.cos(ang), np.sin(ang)


def apply_rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate feature pairs (i, i + dim/2) of ``x[..., N, dim]`` by position-dependent angles."""
    half = x.shape[-1] // 2
    x1 = x[..., :half]
    x2 = x[..., half:]
    rotated = ops.concat([-x2, x1], axis=-1)
    return x * cos + rotated * sin


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, n_heads, d // n_heads)
    return ops.swapaxes(x, -2, -3)                      # (..., H, N, dk)


def merge_heads(x: Tensor) -> Tensor:
    x = ops.swapaxes(x, -2, -3)                         # (..., N, H, dk)
    *lead, n, h, dk = x.shape
    return x.reshape(*lead, n, h * dk)


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: RngStream):
        if d_model % n_heads:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = Linear(d_model, d_model, rng.child("wq"))
        self.wk = Linear(d_model, d_model, rng.child("wk"))
        self.wv = Linear(d_model, d_model, rng.child("wv"))
        self.wo = Linear(d_model, d_model, rng.child("wo"))
        self.last_weights: np.ndarray | None = None

    def logits(self, q_in: Tensor, kv_in: Tensor, rope: tuple | None = None) -> Tensor:
        q = split_heads(self.wq(q_in), self.n_heads)
        k = split_heads(self.wk(kv_in), self.n_heads)
        if rope is not None:
            q = apply_rope(q, *rope)
            k = apply_rope(k, *rope)
        return ops.matmul(q, ops.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(self.d_head))

    def forward(self, q_in: Tensor, kv_in: Tensor | None = None, bias=None, rope: tuple | None = None,
                causal: bool = False, keep_weights: bool = False) -> Tensor:
        """``q_in`` (..., Nq, D) attends over ``kv_in`` (..., Nk, D).

        ``bias`` broadcasts against the (..., H, Nq, Nk) logits and is added before
        the softmax.
        """
        kv_in = q_in if kv_in is None else kv_in
        scores = self.logits(q_in, kv_in, rope)
        if bias is not None:
            scores = scores + bias
        if causal:
            nq, nk = scores.shape[-2:]
            future = np.triu(np.ones((nq, nk), dtype=bool), k=1)
            scores = ops.where(future, NEG_INF, scores)
        weights = ops.softmax(scores, axis=-1)
        if keep_weights:
            self.last_weights = weights.data
        v = split_heads(self.wv(kv_in), self.n_heads)
        return self.wo(merge_heads(ops.matmul(weights, v)))
