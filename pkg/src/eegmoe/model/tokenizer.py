"""Prior-guided tokenizer: channel features -> group tokens.

Per (sample, patch, channel) a multi-scale convolutional stack and a decibel
power spectrum give two feature halves, each z-normalised along the feature
axis. Learned group queries then cross-attend over channels. Static queries
carry a fixed region/network bias plus a learned relaxation; dynamic queries
carry a bias computed from lagged micro-frame channel affinities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..signals.montage import SUPERSET, GroupTable, Montage
from ..tensor import ops
from ..tensor.core import Tensor, as_tensor
from ..tensor.nn import LayerNorm, Linear, MLP, Module, Parameter
from ..tensor.rng import RngStream
from .attention import MultiHeadAttention
from .config import ModelConfig
from .moe import ExpertPool, LayerSpec, RoutingStats

PSD_FLOOR = 1e-12
STAGES = ("pretrain", "finetune")


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def psd_db(x, sample_rate: float) -> Tensor:
    """One-sided Hann-windowed power spectral density in dB along the last axis.

    Used both for the spectral feature path and for reconstruction targets.
    """
    x = as_tensor(x)
    n = x.shape[-1]
    w = hann(n)
    scale = np.full(n // 2 + 1, 2.0 / (sample_rate * np.sum(w ** 2)))
    scale[0] /= 2.0
    scale[-1] /= 2.0
    p = ops.power_spectrum(x, w) * scale
    p = ops.where(p.data > PSD_FLOOR, p, PSD_FLOOR)
    return ops.log(p) * (10.0 / np.log(10.0))


def frame_pairs(n_frames: int, max_lag: int) -> np.ndarray:
    """(i, j) frame pairs with 0 <= i - j <= max_lag, ordered by lag then j."""
    if not 0 <= max_lag < n_frames:
        raise ValueError(f"max_lag {max_lag} must lie in [0, {n_frames})")
    return np.array([(j + lag, j) for lag in range(max_lag + 1) for j in range(n_frames - lag)], dtype=np.int64)


class FeatureEmbed(Module):
    """Temporal (multi-scale conv) and spectral halves, each projected to D_m/2."""

    def __init__(self, cfg: ModelConfig, rng: RngStream):
        self.cfg = cfg
        half = cfg.d_model // 2
        self.convs = []
        length = cfg.patch_len
        for kernel in cfg.conv_kernels:
            cin, blocks = 1, []
            for depth in range(cfg.conv_depth):
                blocks.append(Linear(cin * kernel, cfg.conv_channels, rng.child(f"conv{kernel}.{depth}")))
                cin = cfg.conv_channels
            self.convs.append(blocks)
        for _ in range(cfg.conv_depth):
            length = (length + 2 * (cfg.conv_kernels[0] // 2) - cfg.conv_kernels[0]) // cfg.conv_stride + 1
        self.conv_out = length
        self.w_emb = Linear(len(cfg.conv_kernels) * cfg.conv_channels * length, half, rng.child("w_emb"))
        self.w_psd = Linear(cfg.psd_bins, half, rng.child("w_psd"))
        # channel positional table over the electrode superset
        self.channel_table = Parameter(rng.child("E_c").normal((len(SUPERSET), cfg.d_model), 0.02))

    def temporal(self, x: Tensor) -> Tensor:
        """(N, P) -> (N, D_m/2) before z-normalisation."""
        n = x.shape[0]
        outs = []
        for kernel, blocks in zip(self.cfg.conv_kernels, self.convs):
            h = x.reshape(n, 1, -1)
            for lin in blocks:
                cols = ops.unfold1d(h, kernel, self.cfg.conv_stride, kernel // 2)
                h = ops.swapaxes(ops.gelu(lin(cols)), 1, 2)          # (N, ch, L)
            outs.append(h.reshape(n, -1))
        agg = ops.rms_norm(ops.concat(outs, axis=-1))
        return ops.gelu(self.w_emb(agg))

    def spectral(self, x: Tensor) -> Tensor:
        return self.w_psd(psd_db(x, self.cfg.sample_rate))

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Scaled signal (B,T,C,P) -> (z-normed temporal half, z-normed spectral half)."""
        lead = x.shape[:-1]
        flat = x.reshape(-1, x.shape[-1])
        xt = ops.zscore(self.temporal(flat)).reshape(*lead, -1)
        xs = ops.zscore(self.spectral(flat)).reshape(*lead, -1)
        return xt, xs

    def positions(self, montage: Montage) -> Tensor:
        return self.channel_table[montage.superset_positions()]


class StaticPrior(Module):
    def __init__(self, cfg: ModelConfig, rng: RngStream, table: GroupTable | None = None):
        self.table = table or GroupTable.load()
        self.b_static = cfg.b_static
        full = Montage(SUPERSET)
        self.member = self.table.membership(full)                     # (|P|, |superset|)
        self.queries = Parameter(rng.child("Q_s").normal((len(self.table), cfg.d_model), 0.02))
        self.relax = Parameter(np.zeros(self.member.shape))           # learnable relaxation, starts at 0

    @property
    def fixed_bias(self) -> np.ndarray:
        return np.where(self.member, 0.0, -self.b_static)

    def bias(self, montage: Montage) -> Tensor:
        pos = montage.superset_positions()
        return self.relax[:, pos] + self.fixed_bias[:, pos]

    def preservation(self) -> dict:
        """Relaxation size and in-group minus out-group gap of the effective bias."""
        eff = self.fixed_bias + self.relax.data
        fixed_norm = np.linalg.norm(self.fixed_bias)
        return {"relax_ratio": float(np.linalg.norm(self.relax.data) / fixed_norm) if fixed_norm else 0.0,
                "gap": float(eff[self.member].mean() - eff[~self.member].mean())}


class DynamicPrior(Module):
    def __init__(self, cfg: ModelConfig, rng: RngStream):
        if cfg.n_frames * cfg.frame_len != cfg.patch_len:
            raise ValueError(f"{cfg.n_frames} frames x {cfg.frame_len} samples != patch length {cfg.patch_len}")
        self.n_frames, self.frame_len, self.corr_dim = cfg.n_frames, cfg.frame_len, cfg.corr_dim
        self.pairs = frame_pairs(cfg.n_frames, cfg.max_lag)
        self.phi = Linear(cfg.frame_len, cfg.frame_dim, rng.child("phi"))
        self.w_q = Linear(cfg.frame_dim, cfg.corr_dim, rng.child("W_Q"), bias=False)
        self.w_k = Linear(cfg.frame_dim, cfg.corr_dim, rng.child("W_K"), bias=False)
        self.enc = MLP(5, 16, 1, rng.child("enc"))
        self.queries = Parameter(rng.child("Q_d").normal((len(self.pairs), cfg.d_model), 0.02))

    @property
    def n_groups(self) -> int:
        return len(self.pairs)

    def affinities(self, x: Tensor) -> Tensor:
        """(B,T,C,P) -> lagged frame-pair affinities (B,T,|G|,C,C)."""
        b, t, c, _ = x.shape
        frames = x.reshape(b, t, c, self.n_frames, self.frame_len)
        emb = ops.gelu(self.phi(frames))
        q = ops.swapaxes(self.w_q(emb), 2, 3)                           # (B,T,F,C,d)
        k = ops.swapaxes(self.w_k(emb), 2, 3)
        qi = q[:, :, self.pairs[:, 0]]
        kj = k[:, :, self.pairs[:, 1]]
        return ops.matmul(qi, ops.swapaxes(kj, -1, -2)) * (1.0 / np.sqrt(self.corr_dim))

    def forward(self, x: Tensor) -> Tensor:
        """Dynamic bias M~_d of shape (B,T,|G|,C)."""
        a = self.affinities(x)
        c = a.shape[-1]
        mean = ops.mean(a, axis=-1, keepdims=True)
        std = ops.sqrt(ops.mean((a - mean) ** 2, axis=-1, keepdims=True) + 1e-6)
        order = np.argsort(-a.data, axis=-1, kind="stable")[..., : min(3, c)]
        if order.shape[-1] < 3:
            order = np.concatenate([order] + [order[..., -1:]] * (3 - order.shape[-1]), axis=-1)
        top = ops.take_along_axis(a, order, axis=-1)
        feats = ops.concat([mean, std, top], axis=-1)
        return self.enc(feats).reshape(*a.shape[:-1])


@dataclass
class Selection:
    bias: Tensor          # (B,T,k,C)
    queries: Tensor       # (B,T,k,D)
    index: np.ndarray     # (B,T,k) ascending dynamic-group ids


class GumbelSelector(Module):
    def __init__(self, cfg: ModelConfig, rng: RngStream):
        self.score = MLP(cfg.d_model, 32, 1, rng.child("score"))

    def forward(self, dyn_bias: Tensor, queries: Tensor, tau: float, k: int,
                rng: RngStream | None = None) -> Selection:
        n_groups = dyn_bias.shape[2]
        if not 1 <= k <= n_groups:
            raise ValueError(f"k={k} must lie in [1, {n_groups}]")
        if tau <= 0:
            raise ValueError(f"Gumbel temperature must be positive, got {tau}")
        lam = ops.mean(dyn_bias, axis=-1) + self.score(queries).reshape(n_groups)
        noisy = lam if rng is None else lam + rng.gumbel(lam.shape)
        y = noisy * (1.0 / tau)
        soft = ops.softmax(y, axis=-1)
        idx = np.sort(np.argsort(-y.data, axis=-1, kind="stable")[..., :k], axis=-1)
        hard = np.zeros(y.shape)
        np.put_along_axis(hard, idx, 1.0, axis=-1)
        gate = ops.take_along_axis(ops.straight_through(hard, soft), idx, axis=-1)
        gate = ops.expand_dims(gate, -1)
        c = dyn_bias.shape[-1]
        bias = ops.take_along_axis(dyn_bias, np.repeat(idx[..., None], c, axis=-1), axis=2) * gate
        return Selection(bias, queries[idx] * gate, idx)


def static_group_attention(attn: MultiHeadAttention, queries: Tensor, x: Tensor, bias) -> Tensor:
    """Group queries (..., G, D) attend over channel features x (B,T,C,D) with logit bias (G, C)."""
    return attn(queries, x, bias=bias)


class TokenizerBlock(Module):
    def __init__(self, cfg: ModelConfig, spec: LayerSpec, rng: RngStream):
        self.norm_q = LayerNorm(cfg.d_model)
        self.norm_kv = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng.child("attn"))
        self.norm_ffn = LayerNorm(cfg.d_model)
        self.ffn = ExpertPool(spec, cfg.d_model, cfg.expert_dim, rng.child("ffn"), cfg.n_domains)


@dataclass
class GroupTokens:
    h: Tensor                       # (B,T,G,D)
    group_ids: list                 # static group names then (i, j) frame pairs
    n_static: int
    selection: np.ndarray | None = None
    stats: list[RoutingStats] | None = None
    block_outputs: list[np.ndarray] | None = None


class Tokenizer(Module):
    def __init__(self, cfg: ModelConfig, specs: list[LayerSpec], rng: RngStream, table: GroupTable | None = None):
        self.cfg = cfg
        self.embed = FeatureEmbed(cfg, rng.child("embed"))
        self.static = StaticPrior(cfg, rng.child("static"), table)
        self.dynamic = DynamicPrior(cfg, rng.child("dynamic"))
        self.selector = GumbelSelector(cfg, rng.child("selector"))
        self.mask_token = Parameter(rng.child("mask").normal((cfg.d_model,), 0.02))
        self.blocks = [TokenizerBlock(cfg, s, rng.child(f"block{i}")) for i, s in enumerate(specs)]

    def features(self, x: Tensor, montage: Montage, mask: np.ndarray | None = None) -> Tensor:
        xt, xs = self.embed(x)
        feats = ops.concat([xt, xs], axis=-1)
        if mask is not None:
            feats = ops.where(mask[..., None], self.mask_token, feats)
        return feats + self.embed.positions(montage)

    def forward(self, signal, channel_names, stage: str = "pretrain", mask: np.ndarray | None = None,
                domains=None, tau: float = 1.0, rng: RngStream | None = None, block_hook=None,
                bias_transform=None) -> GroupTokens:
        """Raw signal in volts (B,T,C,P) -> GroupTokens.

        ``mask`` (B,T,C) marks positions whose content is hidden: their raw values
        are zeroed before any feature path and their embedding is replaced by the
        learned mask token. ``bias_transform(static, dynamic)`` may rewrite the two
        bias tensors right before they enter attention (used for attribution).
        """
        if stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
        montage = Montage(tuple(channel_names))
        x = as_tensor(signal) * self.cfg.input_scale
        if mask is not None:
            x = ops.where(mask[..., None], 0.0, x)
        b, t = x.shape[:2]
        feats = self.features(x, montage, mask)

        static_bias = self.static.bias(montage)                         # (|P|, C)
        n_static, c = static_bias.shape
        dyn = self.dynamic(x)                                           # (B,T,|G|,C)
        if stage == "pretrain":
            dyn_q = ops.broadcast_to(self.dynamic.queries, (b, t) + self.dynamic.queries.shape)
            pairs = [tuple(p) for p in self.dynamic.pairs.tolist()]
            sel = None
        else:
            s = self.selector(dyn, self.dynamic.queries, tau, self.cfg.dyn_k, rng)
            dyn, dyn_q, sel = s.bias, s.queries, s.index
            pairs = None
        if bias_transform is not None:
            static_bias, dyn = bias_transform(static_bias, dyn)
        queries = ops.concat([ops.broadcast_to(self.static.queries, (b, t) + self.static.queries.shape), dyn_q], 2)
        bias = ops.concat([ops.broadcast_to(static_bias, (b, t, n_static, c)), dyn], axis=2)
        bias = ops.expand_dims(bias, 2)                                 # broadcast over heads
        g = queries.shape[2]
        expected = n_static + (self.dynamic.n_groups if stage == "pretrain" else self.cfg.dyn_k)
        assert g == expected, f"group-count law violated: {g} != {expected}"

        h, stats, outs = queries, [], []
        for i, blk in enumerate(self.blocks):
            h = h + self._maybe(block_hook, i, "attn",
                                blk.attn(blk.norm_q(h), blk.norm_kv(feats), bias=bias))
            z, st = blk.ffn(blk.norm_ffn(h), domains)
            h = h + self._maybe(block_hook, i, "ffn", z)
            stats.append(st)
            outs.append(h.data)
        ids = list(self.static.table.names) + (pairs if pairs is not None else ["dynamic"] * self.cfg.dyn_k)
        return GroupTokens(h, ids, n_static, sel, stats, outs)

    @staticmethod
    def _maybe(hook, i, where, value):
        return value if hook is None else hook(i, where, value)
