from .checkpoint import CheckpointError, load_checkpoint, model_arrays, restore_model, save_checkpoint
from .metrics import metric_report
from .optim import AdamW, WarmupCosine, clip_grad_norm, exp_anneal
from .runner import (ConfigError, RunConfig, calibrate, load_model, phase_config, probes_from_checkpoints,
                     run_finetune, run_pilot, run_pretrain)

__all__ = ["CheckpointError", "load_checkpoint", "save_checkpoint", "model_arrays", "restore_model",
           "metric_report", "AdamW", "WarmupCosine", "clip_grad_norm", "exp_anneal", "ConfigError", "RunConfig",
           "calibrate", "load_model", "phase_config", "probes_from_checkpoints", "run_finetune", "run_pilot",
           "run_pretrain"]
