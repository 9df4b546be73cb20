"""Sample-wise linear CKA, paradigm sharedness and shared-expert allocation."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

EPS = 1e-8
DEGENERATE_INTRA = 1e-6


def _center(r: np.ndarray) -> np.ndarray:
    return r - r.mean(axis=0, keepdims=True)


def linear_cka(ri: np.ndarray, rj: np.ndarray, eps: float = EPS) -> float:
    """||Ri~^T Rj~||_F^2 / max(||Ri~^T Ri~||_F ||Rj~^T Rj~||_F, eps) with token-centred Ri~, Rj~.

    eps floors the denominator instead of being added to it, so scale invariance is
    exact for any non-degenerate pair; constant representations still give 0.
    """
    ri = np.asarray(ri, dtype=np.float64)
    rj = np.asarray(rj, dtype=np.float64)
    if ri.shape != rj.shape:
        raise ValueError(f"CKA needs equal shapes, got {ri.shape} and {rj.shape}")
    if ri.ndim != 2 or ri.shape[0] < 2:
        raise ValueError(f"CKA needs (N >= 2, D) token matrices, got {ri.shape}")
    a, b = _center(ri), _center(rj)
    cross = np.linalg.norm(a.T @ b) ** 2
    return float(cross / max(np.linalg.norm(a.T @ a) * np.linalg.norm(b.T @ b), eps))


def _pairwise(reps: np.ndarray, eps: float) -> np.ndarray:
    """All-pairs CKA matrix for (n, N, D) representations via centred Gram products."""
    n = len(reps)
    cen = reps - reps.mean(axis=1, keepdims=True)
    # ||A^T B||_F^2 = <A A^T, B B^T>_F ; Gram matrices are N x N
    grams = np.einsum("ind,imd->inm", cen, cen)
    flat = grams.reshape(n, -1)
    cross = flat @ flat.T
    self_norm = np.sqrt(np.clip(np.diag(cross), 0.0, None))
    return cross / np.maximum(np.outer(self_norm, self_norm), eps)


def aggregate_cka(reps: np.ndarray, paradigms: np.ndarray, eps: float = EPS) -> tuple[float, float]:
    """(c_intra, c_inter) for one layer and checkpoint.

    c_intra averages, over paradigms, the mean within-paradigm pair CKA; c_inter
    averages, over unordered paradigm pairs, the mean cross-pair CKA.
    """
    reps = np.asarray(reps, dtype=np.float64)
    paradigms = np.asarray(paradigms)
    labels = np.unique(paradigms)
    if len(labels) < 2:
        raise ValueError("CKA aggregation needs at least two paradigms")
    mat = _pairwise(reps.reshape(len(reps), reps.shape[1], -1), eps)
    groups = {a: np.flatnonzero(paradigms == a) for a in labels}
    intra = []
    for a, idx in groups.items():
        if len(idx) < 2:
            warnings.warn(f"paradigm {a} has fewer than two samples; excluded from c_intra")
            continue
        iu = np.triu_indices(len(idx), k=1)
        intra.append(mat[np.ix_(idx, idx)][iu].mean())
    if not intra:
        raise ValueError("no paradigm has two or more samples")
    inter = [mat[np.ix_(groups[a], groups[b])].mean() for a, b in combinations(labels, 2)]
    return float(np.mean(intra)), float(np.mean(inter))


def sharedness(c_intra: float, c_inter: float, eps: float = EPS) -> float:
    return float(np.clip(c_inter / (c_intra + eps), 0.0, 1.0))


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


@dataclass
class LayerAllocation:
    layer: int
    sharedness: float
    shared_ratio: float
    n_shared: int
    n_specialized: int


@dataclass
class ExpertAllocation:
    layers: list[LayerAllocation]
    rho_min: float
    rho_max: float
    tau: float
    temperature: float
    n_experts: int

    @property
    def shared_counts(self) -> list[int]:
        return [la.n_shared for la in self.layers]

    def to_dict(self) -> dict:
        return {"hyperparameters": {"rho_min": self.rho_min, "rho_max": self.rho_max, "tau": self.tau,
                                    "temperature": self.temperature, "n_experts": self.n_experts},
                "layers": [asdict(la) for la in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "ExpertAllocation":
        hp = d["hyperparameters"]
        return cls([LayerAllocation(**la) for la in d["layers"]], hp["rho_min"], hp["rho_max"], hp["tau"],
                   hp["temperature"], hp["n_experts"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ExpertAllocation":
        return cls.from_dict(json.loads(Path(path).read_text()))


def shared_ratio(s: float, rho_min: float, rho_max: float, tau: float, temperature: float) -> float:
    z = (s - tau) / temperature
    sig = 0.5 * (1.0 + math.tanh(0.5 * z))          # overflow-free logistic
    return rho_min + (rho_max - rho_min) * sig


def allocate(s_bar, rho_min: float = 0.10, rho_max: float = 0.60, tau: float = 0.275,
             temperature: float = 0.040, n_experts: int = 9) -> ExpertAllocation:
    """Per-layer shared/specialized split from mean sharedness."""
    if temperature <= 0:
        raise ValueError(f"CKA temperature must be positive, got {temperature}")
    if not 0.0 <= rho_min <= rho_max <= 1.0:
        raise ValueError(f"need 0 <= rho_min <= rho_max <= 1, got ({rho_min}, {rho_max})")
    layers = []
    for i, s in enumerate(s_bar):
        rho = shared_ratio(float(s), rho_min, rho_max, tau, temperature)
        n_sh = round_half_away(n_experts * rho)
        layers.append(LayerAllocation(i, float(s), rho, n_sh, n_experts - n_sh))
    return ExpertAllocation(layers, rho_min, rho_max, tau, temperature, n_experts)


def uniform_allocation(reference: ExpertAllocation) -> ExpertAllocation:
    """Control with the same total shared experts spread as evenly as possible over layers."""
    counts = reference.shared_counts
    n_layers, total = len(counts), sum(counts)
    base, extra = divmod(total, n_layers)
    layers = [LayerAllocation(i, la.sharedness, (base + (i < extra)) / reference.n_experts, base + (i < extra),
                              reference.n_experts - base - (i < extra))
              for i, la in enumerate(reference.layers)]
    return ExpertAllocation(layers, reference.rho_min, reference.rho_max, reference.tau, reference.temperature,
                            reference.n_experts)


@dataclass
class CkaProfile:
    c_intra: np.ndarray          # (checkpoints, layers)
    c_inter: np.ndarray
    s: np.ndarray                # clipped sharedness; NaN where dropped
    s_bar: np.ndarray            # (layers,)

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}


def cka_profile(probes: list[list[np.ndarray]], paradigms: list[np.ndarray], eps: float = EPS) -> CkaProfile:
    """``probes[t][l]`` holds (n, ...) activations of layer l at checkpoint t."""
    n_ckpt, n_layer = len(probes), len(probes[0])
    ci = np.zeros((n_ckpt, n_layer))
    ce = np.zeros((n_ckpt, n_layer))
    s = np.full((n_ckpt, n_layer), np.nan)
    for t in range(n_ckpt):
        for l in range(n_layer):
            ci[t, l], ce[t, l] = aggregate_cka(probes[t][l], paradigms[t], eps)
            if ci[t, l] < DEGENERATE_INTRA:
                warnings.warn(f"checkpoint {t} layer {l}: c_intra {ci[t, l]:.2e} is degenerate; dropped")
                continue
            s[t, l] = sharedness(ci[t, l], ce[t, l], eps)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        s_bar = np.nanmean(s, axis=0)
    if np.any(np.isnan(s_bar)):
        raise ValueError("every checkpoint was degenerate for some layer")
    return CkaProfile(ci, ce, s, s_bar)
