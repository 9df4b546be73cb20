"""Depth-stratified mixture-of-experts feed-forward block.

Each block owns a pool of ``n_experts`` GELU MLPs split into shared and
specialized experts. Shared experts are eligible for every token. A
specialized expert is eligible only for tokens of the datasets it is assigned
to, so the shared/specialized split changes which experts a token can reach.
Among its eligible experts a token picks the top-k by biased router logits and
mixes them with a softmax over the unbiased logits of the chosen set.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..tensor import ops
from ..tensor.core import Tensor
from ..tensor.nn import Linear, MLP, Module
from ..tensor.rng import RngStream

KINDS = ("tokenizer", "temporal", "group", "decoder")
NEG_INF = -1e30


@dataclass(frozen=True)
class LayerSpec:
    index: int
    kind: str
    n_experts: int
    n_shared: int
    top_k: int

    @property
    def n_specialized(self) -> int:
        return self.n_experts - self.n_shared

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"layer {self.index}: unknown kind {self.kind!r}")
        if not 0 <= self.n_shared <= self.n_experts:
            raise ValueError(f"layer {self.index}: shared count {self.n_shared} outside [0, {self.n_experts}]")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"layer {self.index}: top_k {self.top_k} outside [1, {self.n_experts}]")

    def to_dict(self) -> dict:
        return asdict(self)


def eligibility(n_experts: int, n_shared: int, n_domains: int) -> np.ndarray:
    """(n_domains, n_experts) bool: which experts a token of each domain may use.

    Specialized expert j (0-based within the specialized pool) serves domain
    ``j mod n_domains`` when there are at least as many specialized experts as
    domains; otherwise domain d uses specialized expert ``d mod n_specialized``.
    """
    mask = np.zeros((n_domains, n_experts), dtype=bool)
    mask[:, :n_shared] = True
    n_sp = n_experts - n_shared
    if n_domains == 1:
        mask[:] = True
        return mask
    for j in range(n_sp):
        if n_sp >= n_domains:
            mask[j % n_domains, n_shared + j] = True
        else:
            mask[np.arange(n_domains) % n_sp == j, n_shared + j] = True
    return mask


@dataclass
class RoutingStats:
    counts: np.ndarray             # (E,) token-slot dispatches
    mean_prob: Tensor              # (E,) mean router probability, differentiable
    n_tokens: int
    top_k: int
    domain_counts: np.ndarray | None = None     # (n_domains, E)

    @property
    def fractions(self) -> np.ndarray:
        return self.counts / max(self.counts.sum(), 1)

    def aux_loss(self) -> Tensor:
        n = len(self.counts)
        return ops.sum(self.mean_prob * self.fractions) * float(n)


def update_router_bias(bias: np.ndarray, fractions: np.ndarray, rate: float) -> np.ndarray:
    """Raise the bias of under-loaded experts and lower over-loaded ones by ``rate``."""
    fractions = np.asarray(fractions, dtype=np.float64)
    return bias + rate * np.sign(fractions.mean() - fractions)


class ExpertPool(Module):
    def __init__(self, spec: LayerSpec, d_model: int, d_expert: int, rng: RngStream, n_domains: int = 1):
        spec.validate()
        self.spec = spec
        self.experts = [MLP(d_model, d_expert, d_model, rng.child(f"expert{e}")) for e in range(spec.n_experts)]
        self.router = Linear(d_model, spec.n_experts, rng.child("router"), bias=False, std=0.02)
        # selection-only offset; never receives a gradient
        self.router_bias = np.zeros(spec.n_experts)
        self.n_domains = n_domains
        self.allowed = eligibility(spec.n_experts, spec.n_shared, n_domains)
        short = self.allowed.sum(1) < spec.top_k
        if short.any():
            raise ValueError(f"layer {spec.index}: domains {np.flatnonzero(short).tolist()} reach fewer than "
                             f"top_k={spec.top_k} experts with {spec.n_shared} shared")

    def route(self, logits: np.ndarray, allowed: np.ndarray | None) -> np.ndarray:
        scores = logits + self.router_bias
        if allowed is not None:
            scores = np.where(allowed, scores, NEG_INF)
        return np.argsort(-scores, axis=1, kind="stable")[:, : self.spec.top_k]

    def forward(self, z: Tensor, domains: np.ndarray | None = None) -> tuple[Tensor, RoutingStats]:
        """Token-wise MoE over the last axis; ``domains`` gives one id per leading row (sample)."""
        shape = z.shape
        d = shape[-1]
        flat = z.reshape(-1, d)
        n = flat.shape[0]
        e_total, k = self.spec.n_experts, self.spec.top_k
        logits = self.router(flat)                                      # (N, E)

        allowed = tok_dom = None
        if domains is not None and self.n_domains > 1:
            domains = np.asarray(domains, dtype=np.int64)
            if domains.min() < 0 or domains.max() >= self.n_domains:
                raise ValueError(f"domain ids must lie in [0, {self.n_domains}), got {np.unique(domains)}")
            tok_dom = np.repeat(domains, n // len(domains))
            allowed = self.allowed[tok_dom]

        idx = self.route(logits.data, allowed)                          # (N, k)
        mix = ops.softmax(ops.take_along_axis(logits, idx, axis=1), axis=-1)
        masked = logits if allowed is None else ops.where(allowed, logits, NEG_INF)
        mean_prob = ops.mean(ops.softmax(masked, axis=-1), axis=0)

        rows, outs = [], []
        for e in range(e_total):
            r, s = np.nonzero(idx == e)
            if len(r) == 0:
                continue
            y = self.experts[e](flat[r])
            outs.append(y * ops.expand_dims(mix[r, s], -1))
            rows.append(r)
        out = ops.scatter_add(ops.concat(outs, axis=0), np.concatenate(rows), n)

        counts = np.bincount(idx.ravel(), minlength=e_total).astype(np.float64)
        dom_counts = None
        if tok_dom is not None:
            dom_counts = np.zeros((self.n_domains, e_total))
            np.add.at(dom_counts, (np.repeat(tok_dom, k), idx.ravel()), 1.0)
        stats = RoutingStats(counts, mean_prob, n, k, dom_counts)
        return out.reshape(*shape), stats

    def update_bias(self, stats: RoutingStats, rate: float) -> None:
        self.router_bias = update_router_bias(self.router_bias, stats.fractions, rate)
