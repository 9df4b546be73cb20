"""Full model: tokenizer -> interleaved encoder -> reconstructor / classification heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..signals.montage import Montage
from ..tensor.core import Tensor
from ..tensor.nn import Module
from ..tensor.rng import RngStream
from .config import ModelConfig
from .encoder import EncoderLayer, EncoderOutput, Stochastic, encoder_forward, encoder_kinds
from .heads import DualStreamHead, Reconstructor
from .moe import ExpertPool, LayerSpec, RoutingStats
from .tokenizer import GroupTokens, Tokenizer


def build_specs(cfg: ModelConfig) -> list[LayerSpec]:
    kinds = (["tokenizer"] * cfg.n_tokenizer_blocks + encoder_kinds(cfg.n_encoder_layers)
             + ["decoder"] * cfg.n_decoder_blocks)
    if cfg.dense:
        return [LayerSpec(i, k, 1, 1, 1) for i, k in enumerate(kinds)]
    shared = cfg.shared_experts if cfg.shared_experts is not None else [cfg.n_experts] * len(kinds)
    if len(shared) != len(kinds):
        raise ValueError(f"allocation lists {len(shared)} blocks, model has {len(kinds)}")
    specs = [LayerSpec(i, k, cfg.n_experts, int(s), cfg.top_k) for i, (k, s) in enumerate(zip(kinds, shared))]
    for s in specs:
        s.validate()
    return specs


@dataclass
class ForwardResult:
    tokens: GroupTokens
    encoded: EncoderOutput

    @property
    def h(self) -> Tensor:
        return self.encoded.h

    @property
    def stats(self) -> list[RoutingStats]:
        return list(self.tokens.stats) + list(self.encoded.stats)


class PriseModel(Module):
    def __init__(self, cfg: ModelConfig, n_patches: int, tasks: dict[int, int] | None = None, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.n_patches = n_patches
        self.specs = build_specs(cfg)
        rng = RngStream(seed, "model")
        n_tok, n_enc = cfg.n_tokenizer_blocks, cfg.n_encoder_layers
        self.tokenizer = Tokenizer(cfg, self.specs[:n_tok], rng.child("tokenizer"))
        self.encoder = [EncoderLayer(cfg, s, rng.child(f"encoder{i}"))
                        for i, s in enumerate(self.specs[n_tok:n_tok + n_enc])]
        self.decoder = Reconstructor(cfg, self.specs[n_tok + n_enc:], rng.child("decoder"))
        self.heads: dict[int, DualStreamHead] = {}
        self.n_groups_finetune = len(self.tokenizer.static.table) + cfg.dyn_k
        for task, n_classes in sorted((tasks or {}).items()):
            self.heads[int(task)] = DualStreamHead(n_patches, self.n_groups_finetune, cfg.d_model, n_classes,
                                                   rng.child(f"head{task}"), cfg.head_hidden)
        n_blocks = len(self.specs)
        self.drop_path_rates = [cfg.drop_path * i / max(n_blocks - 1, 1) for i in range(n_blocks)]

    # -- plumbing ----------------------------------------------------------
    def pools(self) -> list[ExpertPool]:
        return ([b.ffn for b in self.tokenizer.blocks] + [layer.ffn for layer in self.encoder]
                + [b.ffn for b in self.decoder.blocks])

    def backbone_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("heads.")]

    def head_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if n.startswith("heads.")]

    def _stochastic(self, rng: RngStream | None) -> Stochastic:
        return Stochastic(rng.child("dropout") if rng is not None else None, self.cfg.dropout,
                          self.drop_path_rates, self.training)

    # -- forward paths -----------------------------------------------------
    def encode(self, signal, channel_names, stage: str = "pretrain", mask=None, domains=None,
               causal: bool = False, tau: float = 1.0, rng: RngStream | None = None, cache: bool = False,
               bias_transform=None) -> ForwardResult:
        """Raw (B,T,C,P) signal -> tokenizer output and encoder output."""
        reg = self._stochastic(rng)
        gumbel = rng.child("gumbel") if (rng is not None and self.training) else None
        tokens = self.tokenizer(signal, channel_names, stage, mask, domains, tau, gumbel,
                                block_hook=lambda i, _w, v: reg(i, v), bias_transform=bias_transform)
        enc = encoder_forward(tokens.h, self.encoder, domains, causal, reg, cache,
                              offset=self.cfg.n_tokenizer_blocks)
        if cache:
            enc.cache[:0] = tokens.block_outputs
        return ForwardResult(tokens, enc)

    def reconstruct(self, h_enc: Tensor, channel_names, domains=None, rng: RngStream | None = None):
        montage = Montage(tuple(channel_names))
        queries = self.tokenizer.embed.positions(montage)
        reg = self._stochastic(rng.child("decoder") if rng is not None else None)
        return self.decoder(h_enc, queries, domains, reg, offset=self.cfg.n_tokenizer_blocks + len(self.encoder))

    def classify(self, h_enc: Tensor, dataset_id: int) -> Tensor:
        if int(dataset_id) not in self.heads:
            raise KeyError(f"no classification head for dataset {dataset_id}")
        return self.heads[int(dataset_id)](h_enc)

    def layer_specs(self) -> list[dict]:
        return [s.to_dict() for s in self.specs]


def encoder_layer_indices(model: PriseModel) -> np.ndarray:
    """Block indices (in MoE-block order) of the encoder layers."""
    n_tok = model.cfg.n_tokenizer_blocks
    return np.arange(n_tok, n_tok + len(model.encoder))
