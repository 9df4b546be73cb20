"""Interleaved temporal/group transformer layers with MoE feed-forward blocks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..tensor import ops
from ..tensor.core import Tensor
from ..tensor.nn import LayerNorm, Module
from ..tensor.rng import RngStream
from .attention import MultiHeadAttention, rope_tables
from .config import ModelConfig
from .moe import ExpertPool, LayerSpec, RoutingStats


class Stochastic:
    """Dropout on residual branches plus per-sample DropPath, active only when training."""

    def __init__(self, rng: RngStream | None, dropout: float, drop_path: list[float], training: bool):
        self.rng = rng
        self.dropout = dropout
        self.drop_path = drop_path
        self.training = training and rng is not None

    def __call__(self, layer: int, value: Tensor) -> Tensor:
        if not self.training:
            return value
        value = ops.dropout(value, self.dropout, self.rng, True)
        p = self.drop_path[layer]
        if p > 0:
            shape = (value.shape[0],) + (1,) * (value.ndim - 1)
            keep = (self.rng.uniform(shape) >= p) / (1.0 - p)
            value = value * keep
        return value


def temporal_attention(attn: MultiHeadAttention, h: Tensor, causal: bool = False) -> Tensor:
    """Self-attention along T for each (sample, group), rotary positions on q/k."""
    hs = ops.swapaxes(h, 1, 2)                                          # (B,G,T,D)
    rope = rope_tables(np.arange(hs.shape[2]), attn.d_head)
    return ops.swapaxes(attn(hs, rope=rope, causal=causal), 1, 2)


def group_attention(attn: MultiHeadAttention, h: Tensor) -> Tensor:
    """Self-attention along G for each (sample, patch); groups carry no position."""
    return attn(h)


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, spec: LayerSpec, rng: RngStream):
        if spec.kind not in ("temporal", "group"):
            raise ValueError(f"encoder layer kind must be temporal or group, got {spec.kind!r}")
        self.kind = spec.kind
        self.norm_attn = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng.child("attn"))
        self.norm_ffn = LayerNorm(cfg.d_model)
        self.ffn = ExpertPool(spec, cfg.d_model, cfg.expert_dim, rng.child("ffn"), cfg.n_domains)

    def forward(self, h: Tensor, domains=None, causal: bool = False, residual=None, index: int = 0):
        residual = residual or (lambda i, v: v)
        x = self.norm_attn(h)
        a = temporal_attention(self.attn, x, causal) if self.kind == "temporal" else group_attention(self.attn, x)
        h = h + residual(index, a)
        z, stats = self.ffn(self.norm_ffn(h), domains)
        return h + residual(index, z), stats


@dataclass
class EncoderOutput:
    h: Tensor
    stats: list[RoutingStats]
    cache: list[np.ndarray] = field(default_factory=list)


def encoder_forward(h0: Tensor, layers: list[EncoderLayer], domains=None, causal: bool = False,
                    residual=None, cache: bool = False, offset: int = 0) -> EncoderOutput:
    """Run the layer stack; ``cache`` keeps a copy of every layer's output."""
    h, stats, acts = h0, [], []
    for i, layer in enumerate(layers):
        h, st = layer(h, domains, causal, residual, offset + i)
        stats.append(st)
        if cache:
            acts.append(h.data)
    return EncoderOutput(h, stats, acts)


def encoder_kinds(n_layers: int) -> list[str]:
    return ["temporal" if i % 2 == 0 else "group" for i in range(n_layers)]
