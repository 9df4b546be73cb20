"""Command-line entry point: ``eegmoe <subcommand> ...``.

Exit codes: 0 success, 1 configuration or runtime error, 2 usage error.
Relative output paths resolve under ``$EEGMOE_RUN_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__

RUN_ROOT_ENV = "EEGMOE_RUN_ROOT"
MANIFEST = "manifest.json"


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers

def resolve_out(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(RUN_ROOT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def load_json_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise CliError(f"{p}: config must be a JSON object")
    return data


def run_config(args, phase: str, **extra):
    from .training.runner import PHASE_DEFAULTS, RunConfig
    base = {**PHASE_DEFAULTS[phase], **load_json_config(args.config), **extra}
    base["phase"] = phase
    if args.seed is not None:
        base["seed"] = args.seed
    if args.variant is not None:
        base["variant"] = args.variant
    return RunConfig.from_dict(base)


def write_manifest(out: Path, argv: list[str], config: dict, seeds: dict, start: float, skip=()) -> None:
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != MANIFEST and p not in skip:
            files[str(p.relative_to(out))] = sha256_file(p)
    manifest = {"command": ["eegmoe"] + list(argv), "config": config, "config_hash": canonical_hash(config),
                "build": f"eegmoe {__version__}", "seeds": seeds,
                "start": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(start)),
                "end": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()), "files": files}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


class OutputGuard:
    """Removes files this command created if it fails."""

    def __init__(self, out: Path):
        self.out = out
        self.existed = out.exists()
        self.before = set(out.rglob("*")) if self.existed else set()

    def __enter__(self):
        self.out.mkdir(parents=True, exist_ok=True)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            return False
        if not self.existed:
            shutil.rmtree(self.out, ignore_errors=True)
        else:
            for p in sorted(set(self.out.rglob("*")) - self.before, reverse=True):
                if p.is_dir():
                    shutil.rmtree(p, ignore_errors=True)
                else:
                    p.unlink(missing_ok=True)
        return False


def _corpus(path: str):
    from .signals.synth import Corpus
    try:
        return Corpus(path)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from exc


def _tasks(spec: str | None) -> list[int] | None:
    if spec is None:
        return None
    try:
        return [int(t) for t in spec.split(",") if t.strip()]
    except ValueError as exc:
        raise CliError(f"--tasks must be comma-separated integers, got {spec!r}") from exc


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth_data(args, argv):
    from .signals.synth import SynthParadigmSpec, default_paradigms, generate_corpus
    cfg = load_json_config(args.config)
    specs = [SynthParadigmSpec.from_dict(p) for p in cfg["paradigms"]] if "paradigms" in cfg else default_paradigms()
    n = args.n_per_paradigm or cfg.get("n_per_paradigm", 64)
    n_patches = args.n_patches or cfg.get("n_patches", 4)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    out = resolve_out(args.out)
    start = time.time()
    with OutputGuard(out):
        generate_corpus(specs, n, seed, out, n_patches=n_patches)
        config = {"paradigms": [s.to_dict() for s in specs], "n_per_paradigm": n, "n_patches": n_patches,
                  "seed": seed}
        write_manifest(out, argv, config, {"corpus": seed}, start)
    print(f"corpus written to {out}")


def cmd_pilot(args, argv):
    from .training.runner import run_pilot
    run = run_config(args, "pilot")
    out = resolve_out(args.out)
    start = time.time()
    with OutputGuard(out):
        res = run_pilot(run, _corpus(args.corpus), out)
        (out / "run_config.json").write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n")
        write_manifest(out, argv, run.to_dict(), {"run": run.seed}, start)
    print(f"pilot: {len(res.checkpoints)} checkpoints in {out}")


def cmd_calibrate(args, argv):
    from .cka import allocate, cka_profile
    from .training.runner import probes_from_checkpoints
    pilot = Path(args.pilot)
    ckpts = sorted(pilot.glob("pilot_step*.ckpt"))
    if not ckpts:
        raise CliError(f"no pilot checkpoints found in {pilot}")
    per = json.loads((pilot / "probe_index.json").read_text())["per_paradigm"] if (pilot / "probe_index.json").exists() else 8
    out = resolve_out(args.out)
    start = time.time()
    with OutputGuard(out):
        probes, paradigms = probes_from_checkpoints(ckpts, _corpus(args.corpus), per)
        profile = cka_profile(probes, paradigms)
        alloc = allocate(profile.s_bar, args.rho_min, args.rho_max, args.tau, args.temperature, args.n_experts)
        alloc.save(out / "allocation.json")
        (out / "cka_profile.json").write_text(json.dumps(profile.to_dict(), indent=2, sort_keys=True) + "\n")
        config = {"rho_min": args.rho_min, "rho_max": args.rho_max, "tau": args.tau,
                  "temperature": args.temperature, "n_experts": args.n_experts,
                  "checkpoints": [str(p) for p in ckpts]}
        write_manifest(out, argv, config, {}, start)
    print("shared experts per layer:", alloc.shared_counts)


def cmd_pretrain(args, argv):
    from .cka import ExpertAllocation
    from .training.runner import run_pretrain
    extra = {"allocation": args.allocation} if args.allocation else {}
    run = run_config(args, "pretrain", **extra)
    alloc = None
    if run.allocation:
        if not Path(run.allocation).exists():
            raise CliError(f"allocation file not found: {run.allocation}")
        alloc = ExpertAllocation.load(run.allocation)
    out = resolve_out(args.out)
    start = time.time()
    with OutputGuard(out):
        res = run_pretrain(run, _corpus(args.corpus), alloc, out)
        (out / "run_config.json").write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n")
        write_manifest(out, argv, run.to_dict(), {"run": run.seed}, start)
    print(f"pretrained checkpoint: {res.checkpoint}")


def cmd_finetune(args, argv):
    from .training.runner import run_finetune
    extra = {}
    if args.ckpt:
        extra["init_checkpoint"] = args.ckpt
    if args.tasks:
        extra["tasks"] = _tasks(args.tasks)
    run = run_config(args, "finetune", **extra)
    if run.init_checkpoint is None or not Path(run.init_checkpoint).exists():
        raise CliError(f"checkpoint not found: {run.init_checkpoint}")
    out = resolve_out(args.out)
    start = time.time()
    with OutputGuard(out):
        res = run_finetune(run, _corpus(args.corpus), out_dir=out)
        (out / "run_config.json").write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n")
        write_manifest(out, argv, run.to_dict(), {"run": run.seed}, start)
    for t, rep in res.report["tasks"].items():
        print(f"task {t} ({rep['name']}): test balanced accuracy {rep['test']['balanced_accuracy']:.3f}")


def _load_for_analysis(args, tasks):
    from .training.runner import load_model
    if not Path(args.ckpt).exists():
        raise CliError(f"checkpoint not found: {args.ckpt}")
    corpus = _corpus(args.corpus)
    model, meta = load_model(args.ckpt, tasks={t: corpus.n_classes(t) for t in tasks})
    return corpus, model


def cmd_analyze(args, argv):
    from .analysis import collect_gradients, write_matrix
    corpus = _corpus(args.corpus)
    tasks = _tasks(args.tasks) or sorted(p.paradigm_id for p in corpus.paradigms)
    _, model = _load_for_analysis(args, tasks)
    seed = args.seed or 0
    out = resolve_out(args.out)
    start = time.time()
    with OutputGuard(out):
        gs = collect_gradients(model, corpus, tasks, n_steps=args.steps, lr=args.lr, seed=seed)
        names = [f"task{t}" for t in tasks]
        write_matrix(out / "cosine.csv", names, gs.cosine())
        write_matrix(out / "affinity.csv", names, gs.affinity(args.rank))
        write_matrix(out / "routing.csv", names, gs.routing_matrix())
        config = {"ckpt": args.ckpt, "tasks": tasks, "steps": args.steps, "rank": args.rank, "lr": args.lr}
        write_manifest(out, argv, config, {"sketch": seed}, start)
    print(f"gradient analysis written to {out}")


def cmd_attribute(args, argv):
    from .analysis import integrated_gradients
    corpus = _corpus(args.corpus)
    _, model = _load_for_analysis(args, [args.task])
    data = corpus.split(args.split)
    idx = np.flatnonzero(data.dataset_id == args.task)
    if len(idx) == 0:
        raise CliError(f"task {args.task} has no samples in split {args.split}")
    samples = idx[: args.n_samples] if args.n_samples else idx
    out = resolve_out(args.out)
    start = time.time()
    with OutputGuard(out):
        total = None
        for i in samples:
            att = integrated_gradients(model, data.subset(np.array([i])), args.task, steps=args.steps)
            total = att if total is None else _accumulate(total, att)
        total.write(out / "attribution.csv")
        config = {"ckpt": args.ckpt, "task": args.task, "split": args.split, "n_samples": int(len(samples)),
                  "steps": args.steps}
        write_manifest(out, argv, config, {}, start)
    print(f"attribution written to {out / 'attribution.csv'}")


def _accumulate(a, b):
    a.scores = a.scores + b.scores
    a.total_ig += b.total_ig
    a.logit_gap += b.logit_gap
    return a


REPORT_COLUMNS = ["task", "name", "best_epoch", "balanced_accuracy", "weighted_f1", "cohen_kappa", "auroc",
                  "auc_pr", "majority_baseline"]


def build_report(run_dir: Path) -> list[dict]:
    rows = []
    metrics = run_dir / "metrics.json"
    if not metrics.exists():
        return rows
    report = json.loads(metrics.read_text())
    for t, rep in sorted(report["tasks"].items(), key=lambda kv: int(kv[0])):
        test = rep["test"] or {}
        rows.append({"task": int(t), "name": rep["name"], "best_epoch": rep["best_epoch"],
                     **{k: test.get(k, "") for k in REPORT_COLUMNS[3:8]},
                     "majority_baseline": rep["majority_baseline"]})
    return rows


def cmd_report(args, argv):
    run_dir = Path(args.run)
    if not run_dir.is_dir():
        raise CliError(f"run directory not found: {run_dir}")
    rows = build_report(run_dir)
    with open(run_dir / "results.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    lines = [f"{'task':>4}  {'name':<16} {'bacc':>6} {'f1':>6} {'kappa':>6} {'major':>6}"]
    for r in rows:
        lines.append(f"{r['task']:>4}  {r['name']:<16} {r['balanced_accuracy']:>6.3f} {r['weighted_f1']:>6.3f} "
                     f"{r['cohen_kappa']:>6.3f} {r['majority_baseline']:>6.3f}")
    text = "\n".join(lines) + "\n"
    (run_dir / "results.txt").write_text(text)
    sys.stdout.write(text)


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
    common.add_argument("--variant", default=None, help="model size: S, B or tiny")
    common.add_argument("--config", default=None, help="JSON config file")

    parser = argparse.ArgumentParser(prog="eegmoe", description="Prior-guided tokenizer + calibrated MoE toolkit")
    parser.add_argument("--version", action="version", version=f"eegmoe {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="subcommand")
    sub.required = True

    p = sub.add_parser("synth-data", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-paradigm", type=int, default=None)
    p.add_argument("--n-patches", type=int, default=None)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("pretrain-pilot", parents=[common], help="train the dense pilot and save checkpoints")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pilot)

    p = sub.add_parser("cka-calibrate", parents=[common], help="sharedness profile and expert allocation")
    p.add_argument("--pilot", required=True, help="pilot run directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rho-min", type=float, default=0.10)
    p.add_argument("--rho-max", type=float, default=0.60)
    p.add_argument("--tau", type=float, default=0.275)
    p.add_argument("--temperature", type=float, default=0.040)
    p.add_argument("--n-experts", type=int, default=9)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("pretrain", parents=[common], help="pretrain the calibrated MoE model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--allocation", default=None, help="allocation.json from cka-calibrate")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="unified multi-task fine-tuning")
    p.add_argument("--corpus", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--tasks", default=None, help="comma-separated dataset ids (default: all)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("analyze-gradients", parents=[common], help="cosine, subspace and routing matrices")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--tasks", default=None)
    p.add_argument("--steps", type=int, default=512, help="gradient steps Q per dataset")
    p.add_argument("--rank", type=int, default=7)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("attribute", parents=[common], help="Integrated Gradients over the prior biases")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--task", type=int, required=True)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--n-samples", type=int, default=0, help="0 = every sample of the task")
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_attribute)

    p = sub.add_parser("report", parents=[common], help="consolidate metrics of a fine-tuning run")
    p.add_argument("--run", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    from .training.runner import ConfigError
    from .training.checkpoint import CheckpointError

    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:          # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    try:
        args.fn(args, argv)
    except (CliError, ConfigError, CheckpointError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"eegmoe {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
