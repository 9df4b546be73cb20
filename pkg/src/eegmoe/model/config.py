"""Model dimensions and per-variant presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass
class ModelConfig:
    variant: str = "S"
    d_model: int = 192
    n_heads: int = 4
    expert_dim: int = 256
    n_tokenizer_blocks: int = 1
    n_encoder_layers: int = 6          # alternating temporal / group, temporal first
    n_decoder_blocks: int = 1
    n_experts: int = 9
    top_k: int = 2
    dense: bool = False                # dense pilot: every MoE block collapses to one expert
    # shared-expert count per MoE block (tokenizer, encoder, decoder order); None -> all shared
    shared_experts: list[int] | None = None
    n_domains: int = 1
    # tokenizer
    patch_len: int = 256
    sample_rate: int = 256
    conv_kernels: tuple[int, ...] = (7, 15, 31)
    conv_channels: int = 8
    conv_stride: int = 4
    conv_depth: int = 2
    input_scale: float = 1e5           # volts -> roughly unit-variance inputs
    b_static: float = 4.0
    n_frames: int = 8
    frame_dim: int = 16
    corr_dim: int = 8
    max_lag: int = 2
    dyn_k: int = 12
    # heads
    head_hidden: int = 128
    dropout: float = 0.1
    drop_path: float = 0.1

    def __post_init__(self):
        self.conv_kernels = tuple(self.conv_kernels)
        if self.shared_experts is not None:
            self.shared_experts = [int(s) for s in self.shared_experts]

    @property
    def n_moe_blocks(self) -> int:
        return self.n_tokenizer_blocks + self.n_encoder_layers + self.n_decoder_blocks

    @property
    def frame_len(self) -> int:
        return self.patch_len // self.n_frames

    @property
    def n_dynamic(self) -> int:
        return sum(self.n_frames - lag for lag in range(self.max_lag + 1))

    @property
    def psd_bins(self) -> int:
        return self.patch_len // 2 + 1

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % 2 or (self.d_model // self.n_heads) % 2:
            raise ValueError("d_model and head dim must be even (feature halves, rotary pairs)")
        if self.patch_len % self.n_frames:
            raise ValueError(f"patch_len {self.patch_len} not divisible by n_frames {self.n_frames}")
        if not 0 <= self.max_lag < self.n_frames:
            raise ValueError(f"max_lag must lie in [0, n_frames): got {self.max_lag}")
        if self.n_encoder_layers % 2:
            raise ValueError("encoder needs an even number of layers (temporal/group pairs)")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k {self.top_k} outside [1, {self.n_experts}]")
        if not 1 <= self.dyn_k <= self.n_dynamic:
            raise ValueError(f"dyn_k {self.dyn_k} outside [1, {self.n_dynamic}]")
        if self.shared_experts is not None:
            if len(self.shared_experts) != self.n_moe_blocks:
                raise ValueError(f"shared_experts has {len(self.shared_experts)} entries, "
                                 f"model has {self.n_moe_blocks} MoE blocks")
            if any(not 0 <= s <= self.n_experts for s in self.shared_experts):
                raise ValueError(f"shared expert counts must lie in [0, {self.n_experts}]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_kernels"] = list(self.conv_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


# Rows of the variant table; S is the desk-scale default.
VARIANTS = {
    "S": dict(d_model=192, n_heads=4, expert_dim=256, n_tokenizer_blocks=1, n_encoder_layers=6,
              n_decoder_blocks=1),
    "B": dict(d_model=384, n_heads=8, expert_dim=256, n_tokenizer_blocks=2, n_encoder_layers=8,
              n_decoder_blocks=2),
    # not a published size: a narrow model for fast unit tests
    "tiny": dict(d_model=32, n_heads=4, expert_dim=32, n_tokenizer_blocks=1, n_encoder_layers=2,
                 n_decoder_blocks=1, n_experts=4, conv_channels=2, frame_dim=4, corr_dim=4,
                 head_hidden=16, dyn_k=4),
}


def variant_config(name: str, **overrides) -> ModelConfig:
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    cfg = ModelConfig(variant=name, **{**VARIANTS[name], **overrides})
    cfg.validate()
    return cfg


__all__ = ["ModelConfig", "VARIANTS", "variant_config"]
