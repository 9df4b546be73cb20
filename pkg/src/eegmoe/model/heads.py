"""Stage-specific decoders: signal reconstructor and dual-stream classifier."""

from __future__ import annotations

from ..tensor import ops
from ..tensor.core import Tensor
from ..tensor.nn import LayerNorm, Linear, MLP, Module
from ..tensor.rng import RngStream
from .attention import MultiHeadAttention
from .config import ModelConfig
from .moe import ExpertPool, LayerSpec, RoutingStats


class DecoderBlock(Module):
    def __init__(self, cfg: ModelConfig, spec: LayerSpec, rng: RngStream):
        self.norm_q = LayerNorm(cfg.d_model)
        self.norm_kv = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng.child("attn"))
        self.norm_ffn = LayerNorm(cfg.d_model)
        self.ffn = ExpertPool(spec, cfg.d_model, cfg.expert_dim, rng.child("ffn"), cfg.n_domains)


class Reconstructor(Module):
    """Channel queries cross-attend to the group tokens of their own patch."""

    def __init__(self, cfg: ModelConfig, specs: list[LayerSpec], rng: RngStream):
        self.blocks = [DecoderBlock(cfg, s, rng.child(f"block{i}")) for i, s in enumerate(specs)]
        self.norm_out = LayerNorm(cfg.d_model)
        self.out = Linear(cfg.d_model, cfg.patch_len + cfg.psd_bins, rng.child("out"), std=0.02)

    def forward(self, h_enc: Tensor, channel_queries: Tensor, domains=None, residual=None,
                offset: int = 0) -> tuple[Tensor, list[RoutingStats]]:
        """(B,T,G,D) context + (C,D) queries -> (B,T,C, P + D_s)."""
        residual = residual or (lambda i, v: v)
        b, t = h_enc.shape[:2]
        q = ops.broadcast_to(channel_queries, (b, t) + channel_queries.shape)
        stats = []
        self.last_block_outputs = []
        for i, blk in enumerate(self.blocks):
            q = q + residual(offset + i, blk.attn(blk.norm_q(q), blk.norm_kv(h_enc)))
            z, st = blk.ffn(blk.norm_ffn(q), domains)
            q = q + residual(offset + i, z)
            stats.append(st)
            self.last_block_outputs.append(q.data)
        return self.out(self.norm_out(q)), stats


class DualStreamHead(Module):
    """Temporal branch pools over groups, group branch pools over patches; both are fused."""

    def __init__(self, n_patches: int, n_groups: int, d_model: int, n_classes: int, rng: RngStream,
                 hidden: int = 128):
        self.n_patches, self.n_groups = n_patches, n_groups
        self.norm_in = LayerNorm(d_model)      # the pre-norm encoder leaves its residual stream unnormalised
        self.temporal = MLP(n_patches * d_model, hidden, d_model, rng.child("temporal"))
        self.group = MLP(n_groups * d_model, hidden, d_model, rng.child("group"))
        self.norm = LayerNorm(2 * d_model)
        self.fuse = MLP(2 * d_model, hidden, n_classes, rng.child("fuse"))

    def forward(self, h: Tensor) -> Tensor:
        b, t, g, _ = h.shape
        if (t, g) != (self.n_patches, self.n_groups):
            raise ValueError(f"head built for (T, G) = ({self.n_patches}, {self.n_groups}), got ({t}, {g})")
        h = self.norm_in(h)
        zt = self.temporal(ops.mean(h, axis=2).reshape(b, -1))
        zg = self.group(ops.mean(h, axis=1).reshape(b, -1))
        return self.fuse(self.norm(ops.concat([zt, zg], axis=-1)))


def flat_head_parameters(n_patches: int, n_groups: int, d_model: int, n_classes: int, hidden: int = 128) -> int:
    """Parameter count of a flatten-everything MLP head (T*G*D -> hidden -> classes)."""
    d_in = n_patches * n_groups * d_model
    return d_in * hidden + hidden + hidden * n_classes + n_classes
