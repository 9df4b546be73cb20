"""Dense pilot, calibrated MoE pretraining and unified multi-task fine-tuning."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..cka import CkaProfile, ExpertAllocation, cka_profile
from ..model.config import ModelConfig, variant_config
from ..model.network import PriseModel
from ..objectives import AUX_WEIGHT, MASK_RATIO, class_weights, finetune_loss, pretrain_loss
from ..signals.synth import Corpus, EegBatch
from ..tensor import ops
from ..tensor.core import Tensor, backward, no_grad
from ..tensor.rng import RngStream
from .checkpoint import load_checkpoint, model_arrays, restore_model, save_checkpoint
from .metrics import majority_baseline, metric_report
from .optim import AdamW, WarmupCosine, clip_grad_norm, exp_anneal

PHASES = ("pilot", "pretrain", "finetune")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    phase: str = "pretrain"
    variant: str = "S"
    model: dict = field(default_factory=dict)       # ModelConfig overrides
    corpus: str = ""
    out_dir: str = ""
    allocation: str | None = None
    init_checkpoint: str | None = None
    seed: int = 0
    epochs: int = 5
    warmup_epochs: int = 1
    frozen_epochs: int = 0
    steps_per_epoch: int | None = None
    batch_size: int = 8
    lr: float = 1e-4
    head_lr_mult: float = 5.0
    weight_decay: float = 0.05
    grad_clip: float = 1.0
    aux_weight: float = AUX_WEIGHT
    router_bias_rate: float = 1e-4
    mask_ratio: float = MASK_RATIO
    gumbel_k: int = 12
    tau_start: float = 1.0
    tau_end: float = 0.1
    n_checkpoints: int = 5
    probe_per_paradigm: int = 8
    tasks: list[int] | None = None
    save_optimizer: bool = True

    def validate(self) -> None:
        def bad(name, why):
            raise ConfigError(f"run.{name}: {why}")
        if self.phase not in PHASES:
            bad("phase", f"must be one of {PHASES}, got {self.phase!r}")
        for name in ("epochs", "batch_size", "n_checkpoints", "probe_per_paradigm", "gumbel_k"):
            if int(getattr(self, name)) < 1:
                bad(name, "must be >= 1")
        for name in ("warmup_epochs", "frozen_epochs"):
            if int(getattr(self, name)) < 0:
                bad(name, "must be >= 0")
        if self.frozen_epochs >= self.epochs and self.phase == "finetune":
            bad("frozen_epochs", "must leave at least one trainable epoch")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            bad("steps_per_epoch", "must be >= 1 or null")
        for name in ("lr", "head_lr_mult", "tau_start", "tau_end"):
            if not getattr(self, name) > 0:
                bad(name, "must be > 0")
        for name in ("weight_decay", "grad_clip", "aux_weight", "router_bias_rate"):
            if getattr(self, name) < 0:
                bad(name, "must be >= 0")
        if not 0.0 < self.mask_ratio < 1.0:
            bad("mask_ratio", "must lie in (0, 1)")
        if not isinstance(self.model, dict):
            bad("model", "must be an object of model-config overrides")
        try:
            variant_config(self.variant, **self.model)
        except (TypeError, ValueError) as exc:
            bad("variant" if "variant" in str(exc) else "model", str(exc))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"run.{unknown[0]}: unknown field")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


PHASE_DEFAULTS = {
    "pilot": dict(epochs=5, warmup_epochs=1, lr=1e-4, weight_decay=0.05),
    "pretrain": dict(epochs=5, warmup_epochs=1, lr=1e-4, weight_decay=0.05),
    "finetune": dict(epochs=20, warmup_epochs=2, frozen_epochs=1, lr=5e-5, weight_decay=0.05),
}


def phase_config(phase: str, **overrides) -> RunConfig:
    cfg = RunConfig(phase=phase, **{**PHASE_DEFAULTS[phase], **overrides})
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# shared helpers

def build_model(run: RunConfig, corpus: Corpus, dense: bool = False, shared: list[int] | None = None,
                tasks: dict[int, int] | None = None, model_dict: dict | None = None) -> PriseModel:
    if model_dict is not None:
        cfg = ModelConfig.from_dict(model_dict)
        cfg.dyn_k = run.gumbel_k
        cfg.validate()
    else:
        over = {"n_domains": corpus.n_datasets, "dyn_k": run.gumbel_k, **run.model}
        cfg = variant_config(run.variant, dense=dense, shared_experts=shared, **over)
    n_patches = corpus.split("train").signal.shape[1]
    return PriseModel(cfg, n_patches, tasks, seed=run.seed)


def steps_per_epoch(run: RunConfig, n_items: int) -> int:
    full = max(n_items // run.batch_size, 1)
    return full if run.steps_per_epoch is None else min(full, run.steps_per_epoch)


def epoch_batches(data: EegBatch, run: RunConfig, rng: RngStream, n_steps: int, dataset_id=None):
    """Exactly ``n_steps`` shuffled full batches, reshuffling when the data runs out."""
    idx = np.arange(len(data)) if dataset_id is None else np.flatnonzero(data.dataset_id == dataset_id)
    if len(idx) == 0:
        raise ValueError(f"no training samples for dataset {dataset_id}")
    bs = min(run.batch_size, len(idx))
    order, pos, k = idx[rng.permutation(len(idx))], 0, 0
    for _ in range(n_steps):
        if pos + bs > len(order):
            k += 1
            order, pos = idx[rng.child(f"reshuffle{k}").permutation(len(idx))], 0
        yield data.subset(np.sort(order[pos:pos + bs]))
        pos += bs


def _fmt(x: float) -> str:
    return repr(float(x))


class LossLog:
    def __init__(self, path: Path | None, columns: list[str]):
        self.rows: list[dict] = []
        self.columns = columns
        self.path = path

    def append(self, row: dict) -> None:
        self.rows.append(row)

    def write(self) -> None:
        if self.path is None:
            return
        with open(self.path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([r[c] if isinstance(r[c], (int, str)) else _fmt(r[c]) for c in self.columns])


def checkpoint_meta(model: PriseModel, run: RunConfig, step: int, phase: str, extra: dict | None = None) -> dict:
    meta = {"phase": phase, "step": step, "model_config": model.cfg.to_dict(), "layer_specs": model.layer_specs(),
            "run_config": run.to_dict(), "n_patches": model.n_patches,
            "tasks": {str(k): len(h.fuse.fc2.bias.data) for k, h in model.heads.items()}}
    meta.update(extra or {})
    return meta


def write_checkpoint(path, model: PriseModel, run: RunConfig, step: int, phase: str, opt: AdamW | None = None,
                     extra: dict | None = None) -> None:
    arrays = dict(model_arrays(model))
    meta = checkpoint_meta(model, run, step, phase, extra)
    if opt is not None:
        st = opt.state()
        meta["adam_t"] = st["t"]
        for name in opt.names:
            arrays[f"adam_m/{name}"] = st["m"][name]
            arrays[f"adam_v/{name}"] = st["v"][name]
    save_checkpoint(path, arrays, meta)


def load_model(path, corpus: Corpus | None = None, run: RunConfig | None = None,
               tasks: dict[int, int] | None = None) -> tuple[PriseModel, dict]:
    """Rebuild a model from a checkpoint header and restore its arrays.

    With ``tasks`` the model gets fresh heads for those tasks; heads present in the
    checkpoint are restored when shapes match.
    """
    arrays, meta = load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    if run is not None:
        cfg.dyn_k = run.gumbel_k
    cfg.validate()
    if tasks is None:
        tasks = {int(k): v for k, v in meta.get("tasks", {}).items()}
    model = PriseModel(cfg, meta["n_patches"], tasks, seed=(run.seed if run is not None else 0))
    restore_model(model, arrays, strict=False)
    return model, meta


def aggregate_stats(stats: list, n_pools: int) -> list[np.ndarray]:
    """Sum dispatch counts per pool over repeated forward passes (stats listed in pool order per pass)."""
    counts = [np.zeros_like(stats[j].counts) for j in range(n_pools)]
    for i, st in enumerate(stats):
        counts[i % n_pools] = counts[i % n_pools] + st.counts
    return counts


def update_router_biases(model: PriseModel, stats: list, rate: float) -> None:
    pools = model.pools()
    for pool, counts in zip(pools, aggregate_stats(stats, len(pools))):
        if len(counts) > 1:
            frac = counts / max(counts.sum(), 1.0)
            pool.router_bias = pool.router_bias + rate * np.sign(frac.mean() - frac)


# ---------------------------------------------------------------------------
# probes for calibration

def probe_batch(corpus: Corpus, per_paradigm: int, split: str = "train") -> EegBatch:
    data = corpus.split(split)
    idx = []
    for p in np.unique(data.paradigm_id):
        idx.extend(np.flatnonzero(data.paradigm_id == p)[:per_paradigm].tolist())
    return data.subset(np.array(sorted(idx)))


def collect_probes(model: PriseModel, batch: EegBatch) -> list[np.ndarray]:
    """Per-sample token matrices for every block: list over blocks of (n, tokens, D)."""
    was = model.training
    model.eval()
    with no_grad():
        fwd = model.encode(batch.signal, batch.channel_names, "pretrain", domains=batch.dataset_id, cache=True)
        model.reconstruct(fwd.h, batch.channel_names, batch.dataset_id)
    acts = list(fwd.encoded.cache) + list(model.decoder.last_block_outputs)
    model.train(was)
    n = len(batch)
    return [a.reshape(n, -1, a.shape[-1]) for a in acts]


# ---------------------------------------------------------------------------
# pretraining (pilot and calibrated)

@dataclass
class PretrainResult:
    checkpoint: Path | None
    losses: list[dict]
    model: PriseModel
    checkpoints: list[Path] = field(default_factory=list)
    probes: list[list[np.ndarray]] = field(default_factory=list)
    probe_paradigms: list[np.ndarray] = field(default_factory=list)


def _pretrain_loop(run: RunConfig, corpus: Corpus, model: PriseModel, out: Path | None, phase: str,
                   checkpoint_steps: set[int] = frozenset(), on_checkpoint=None) -> tuple[list[dict], AdamW]:
    train = corpus.split("train")
    spe = steps_per_epoch(run, len(train))
    total = run.epochs * spe
    sched = WarmupCosine(run.lr, total, run.warmup_epochs * spe)
    opt = AdamW(list(model.named_parameters()), run.weight_decay)
    log = LossLog(out / "losses.csv" if out else None,
                  ["step", "epoch", "lr", "total", "mae_tp", "mae_ch", "gpt", "aux", "grad_norm"])
    root = RngStream(run.seed, phase)
    model.train()
    step = 0
    for epoch in range(run.epochs):
        for batch in epoch_batches(train, run, root.child(f"epoch{epoch}"), spe):
            model.zero_grad()
            parts = pretrain_loss(model, batch.signal, batch.channel_names, batch.dataset_id,
                                  root.child(f"step{step}"), run.aux_weight, run.mask_ratio)
            backward(parts.total)
            params = model.parameters()
            gnorm = clip_grad_norm(params, run.grad_clip)
            lr = sched(step)
            opt.step(lr)
            update_router_biases(model, parts.stats, run.router_bias_rate)
            log.append({"step": step, "epoch": epoch, "lr": lr, **parts.values(), "grad_norm": gnorm})
            step += 1
            if step in checkpoint_steps and on_checkpoint is not None:
                on_checkpoint(step, opt)
    log.write()
    return log.rows, opt


def checkpoint_schedule(total_steps: int, n: int) -> list[int]:
    """Steps at 1/n, 2/n, ..., n/n of training (at least step 1, strictly increasing)."""
    steps = sorted({max(1, int(round(total_steps * (q + 1) / n))) for q in range(n)})
    return steps


def run_pilot(run: RunConfig, corpus: Corpus, out_dir=None) -> PretrainResult:
    """Dense twin trained on the pretraining objective; probes every block at the checkpoint steps."""
    out = Path(out_dir) if out_dir else (Path(run.out_dir) if run.out_dir else None)
    if out:
        out.mkdir(parents=True, exist_ok=True)
    model = build_model(run, corpus, dense=True)
    batch = probe_batch(corpus, run.probe_per_paradigm)
    total = run.epochs * steps_per_epoch(run, len(corpus.split("train")))
    sched = checkpoint_schedule(total, run.n_checkpoints)
    result = PretrainResult(None, [], model)

    def on_ckpt(step, _opt):
        if out:
            path = out / f"pilot_step{step:06d}.ckpt"
            write_checkpoint(path, model, run, step, "pilot")
            result.checkpoints.append(path)
        result.probes.append(collect_probes(model, batch))
        result.probe_paradigms.append(np.asarray(batch.paradigm_id).copy())

    result.losses, _ = _pretrain_loop(run, corpus, model, out, "pilot", set(sched), on_ckpt)
    if out:
        (out / "probe_index.json").write_text(json.dumps({"per_paradigm": run.probe_per_paradigm,
                                                          "split": "train", "steps": sched}, indent=2) + "\n")
    result.checkpoint = result.checkpoints[-1] if result.checkpoints else None
    return result


def calibrate(probes, paradigms, rho_min=0.10, rho_max=0.60, tau=0.275, temperature=0.040,
              n_experts=9) -> tuple[CkaProfile, ExpertAllocation]:
    from ..cka import allocate
    profile = cka_profile(probes, paradigms)
    return profile, allocate(profile.s_bar, rho_min, rho_max, tau, temperature, n_experts)


def probes_from_checkpoints(paths, corpus: Corpus, per_paradigm: int):
    batch = probe_batch(corpus, per_paradigm)
    probes, paradigms = [], []
    for p in paths:
        model, _ = load_model(p)
        probes.append(collect_probes(model, batch))
        paradigms.append(np.asarray(batch.paradigm_id).copy())
    return probes, paradigms


def run_pretrain(run: RunConfig, corpus: Corpus, allocation: ExpertAllocation | None, out_dir=None) -> PretrainResult:
    out = Path(out_dir) if out_dir else (Path(run.out_dir) if run.out_dir else None)
    if out:
        out.mkdir(parents=True, exist_ok=True)
    shared = allocation.shared_counts if allocation is not None else None
    model = build_model(run, corpus, shared=shared)
    if allocation is not None and [s.n_shared for s in model.specs] != shared:
        raise RuntimeError("layer specs disagree with the allocation file")
    losses, opt = _pretrain_loop(run, corpus, model, out, "pretrain")
    path = None
    if out:
        path = out / "pretrain.ckpt"
        write_checkpoint(path, model, run, len(losses), "pretrain", opt if run.save_optimizer else None)
    return PretrainResult(path, losses, model)


# ---------------------------------------------------------------------------
# fine-tuning

def predict_proba(model: PriseModel, data: EegBatch, dataset_id: int, batch_size: int = 32) -> np.ndarray:
    was = model.training
    model.eval()
    out = []
    with no_grad():
        for start in range(0, len(data), batch_size):
            b = data.subset(np.arange(start, min(start + batch_size, len(data))))
            fwd = model.encode(b.signal, b.channel_names, "finetune", domains=b.dataset_id)
            out.append(ops.softmax(model.classify(fwd.h, dataset_id), -1).data)
    model.train(was)
    return np.concatenate(out, axis=0)


def task_split(corpus: Corpus, split: str, dataset_id: int) -> EegBatch:
    data = corpus.split(split)
    return data.subset(np.flatnonzero(data.dataset_id == dataset_id))


@dataclass
class FinetuneResult:
    checkpoint: Path | None
    report: dict
    losses: list[dict]
    model: PriseModel


def run_finetune(run: RunConfig, corpus: Corpus, checkpoint=None, out_dir=None,
                 model: PriseModel | None = None) -> FinetuneResult:
    """Unified fine-tuning: every step takes one batch from each task, summed losses."""
    out = Path(out_dir) if out_dir else (Path(run.out_dir) if run.out_dir else None)
    if out:
        out.mkdir(parents=True, exist_ok=True)
    task_ids = sorted(run.tasks) if run.tasks else sorted(int(p.paradigm_id) for p in corpus.paradigms)
    tasks = {t: corpus.n_classes(t) for t in task_ids}
    checkpoint = checkpoint or run.init_checkpoint
    if model is None:
        if checkpoint is None:
            raise ConfigError("run.init_checkpoint: fine-tuning needs a pretrained checkpoint")
        model, _ = load_model(checkpoint, corpus, run, tasks)
    train = corpus.split("train")
    per_task_train = {t: task_split(corpus, "train", t) for t in task_ids}
    weights = {t: class_weights(per_task_train[t].label, tasks[t]) for t in task_ids}
    spe = steps_per_epoch(run, max(len(d) for d in per_task_train.values()))
    total = run.epochs * spe
    sched = WarmupCosine(run.lr, total, run.warmup_epochs * spe)
    named = list(model.named_parameters())
    mult = {n: run.head_lr_mult for n, _ in model.head_parameters()}
    opt = AdamW(named, run.weight_decay, lr_mult=mult)
    backbone = {n for n, _ in model.backbone_parameters()}
    root = RngStream(run.seed, "finetune")
    log = LossLog(out / "losses.csv" if out else None,
                  ["step", "epoch", "lr", "tau", "total"] + [f"task{t}" for t in task_ids])
    history: dict[int, list[dict]] = {t: [] for t in task_ids}
    best_mean, best_arrays, step = -np.inf, None, 0
    model.train()
    for epoch in range(run.epochs):
        frozen = epoch < run.frozen_epochs
        iters = {t: epoch_batches(per_task_train[t], run, root.child(f"epoch{epoch}.task{t}"), spe)
                 for t in task_ids}
        for _ in range(spe):
            batches = [(t, next(iters[t])) for t in task_ids]       # round robin: every task each cycle
            tau = exp_anneal(run.tau_start, run.tau_end, step, total)
            model.zero_grad()
            if frozen:
                total_loss, per_task, stats = _frozen_step(model, batches, root.child(f"step{step}"), tau, weights)
            else:
                total_loss, per_task, _, stats = finetune_loss(model, batches, root.child(f"step{step}"), tau,
                                                               run.aux_weight, weights)
            backward(total_loss)
            clip_grad_norm(model.parameters(), run.grad_clip)
            lr = sched(step)
            opt.step(lr, frozen=backbone if frozen else None)
            if not frozen:
                update_router_biases_ft(model, stats, run.router_bias_rate)
            log.append({"step": step, "epoch": epoch, "lr": lr, "tau": tau, "total": float(total_loss.data),
                        **{f"task{t}": float(per_task[t].data) for t in task_ids}})
            step += 1
        epoch_scores = []
        for t in task_ids:
            rec = {"epoch": epoch}
            for split in ("valid", "test"):
                d = task_split(corpus, split, t)
                rec[split] = metric_report(d.label, predict_proba(model, d, t)) if len(d) else None
            history[t].append(rec)
            if rec["valid"] is not None:
                epoch_scores.append(rec["valid"]["balanced_accuracy"])
        mean_valid = float(np.mean(epoch_scores)) if epoch_scores else -np.inf
        if mean_valid > best_mean:
            best_mean, best_arrays = mean_valid, {k: v.copy() for k, v in model_arrays(model).items()}
    log.write()

    report = {"tasks": {}, "best_mean_valid_epoch": None}
    for t in task_ids:
        valid_scores = [h["valid"]["balanced_accuracy"] if h["valid"] else -np.inf for h in history[t]]
        best = int(np.argmax(valid_scores))
        d_train, d_test = per_task_train[t], task_split(corpus, "test", t)
        report["tasks"][str(t)] = {
            "name": next(p.name for p in corpus.paradigms if p.paradigm_id == t),
            "n_classes": tasks[t], "best_epoch": best,
            "valid": history[t][best]["valid"], "test": history[t][best]["test"],
            "majority_baseline": majority_baseline(d_train.label, d_test.label, tasks[t]),
        }
    report["history"] = {str(t): history[t] for t in task_ids}
    if best_arrays is not None:
        restore_model(model, best_arrays)
    path = None
    if out:
        path = out / "finetune.ckpt"
        write_checkpoint(path, model, run, step, "finetune")
        (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return FinetuneResult(path, report, log.rows, model)


def _frozen_step(model: PriseModel, batches, rng: RngStream, tau: float, weights):
    """Heads-only step: the backbone runs without a tape, so its parameters get no gradient."""
    from ..objectives import loss_wce
    total, per_task, stats = None, {}, []
    for t, b in batches:
        with no_grad():
            fwd = model.encode(b.signal, b.channel_names, "finetune", domains=b.dataset_id, tau=tau,
                               rng=rng.child(f"task{t}"))
        logits = model.classify(Tensor(fwd.h.data), t)
        loss = loss_wce(logits, b.label, weights.get(t))
        per_task[t] = loss
        total = loss if total is None else total + loss
    return total, per_task, stats


def update_router_biases_ft(model: PriseModel, stats: list, rate: float) -> None:
    """Fine-tuning passes skip the decoder, so stats cover tokenizer + encoder pools only."""
    pools = model.pools()[: model.cfg.n_tokenizer_blocks + len(model.encoder)]
    n = len(pools)
    for j, pool in enumerate(pools):
        counts = sum(st.counts for st in stats[j::n])
        if len(counts) > 1:
            frac = counts / max(counts.sum(), 1.0)
            pool.router_bias = pool.router_bias + rate * np.sign(frac.mean() - frac)


__all__ = ["RunConfig", "ConfigError", "phase_config", "run_pilot", "run_pretrain", "run_finetune", "calibrate",
           "probes_from_checkpoints", "load_model", "write_checkpoint", "collect_probes", "probe_batch",
           "predict_proba", "checkpoint_schedule"]
