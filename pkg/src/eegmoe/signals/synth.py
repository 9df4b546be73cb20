"""Synthetic multi-paradigm EEG-like corpus.

Each paradigm draws band-limited background activity with its own relative
band powers on every channel, plus a focal rhythm confined to the groups named
in its spatial mixing. The focal source is shared by the channels of a group,
so paradigm identity shows both in the spectrum and in the spatial layout.
The class label sets the phase offset of a shared carrier oscillation between
two channel sets of one group; per-channel spectra do not depend on the label.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..tensor.linalg import fft, ifft
from ..tensor.rng import RngStream
from .filters import design_bandpass, fft_convolve_same
from .montage import STANDARD_1020, GroupTable, Montage

SAMPLE_RATE = 256
BANDS = {"delta": (1.0, 4.0), "theta": (4.0, 8.0), "alpha": (8.0, 13.0),
         "beta": (13.0, 30.0), "gamma": (30.0, 45.0)}
SPLITS = ("train", "valid", "test")
VOLT = 1e-6


@dataclass
class SynthParadigmSpec:
    name: str
    paradigm_id: int
    band_powers: dict[str, float]
    spatial_mixing: dict[str, float] = field(default_factory=dict)
    # label = phase relation of the carrier between the two channel sets
    label_group: str = "Occipital"
    label_channels: tuple[tuple[str, ...], tuple[str, ...]] = (("O1",), ("O2",))
    carrier_band: str = "alpha"
    carrier_amplitude_uv: float = 12.0
    n_classes: int = 2
    noise_sigma_uv: float = 2.0
    background_uv: float = 10.0
    focal_band: str | None = None        # defaults to the carrier band
    focal_uv: float = 10.0

    def validate(self) -> None:
        for band, pw in self.band_powers.items():
            if band not in BANDS:
                raise ValueError(f"{self.name}: unknown band {band!r}")
            if pw < 0:
                raise ValueError(f"{self.name}: band power for {band} is negative")
        if self.carrier_band not in BANDS:
            raise ValueError(f"{self.name}: unknown carrier band {self.carrier_band!r}")
        if self.focal_band is not None and self.focal_band not in BANDS:
            raise ValueError(f"{self.name}: unknown focal band {self.focal_band!r}")
        for group, gain in self.spatial_mixing.items():
            if gain < 0:
                raise ValueError(f"{self.name}: spatial gain for {group} is negative")
        if self.n_classes < 2:
            raise ValueError(f"{self.name}: need at least two classes")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label_channels"] = [list(c) for c in self.label_channels]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthParadigmSpec":
        d = dict(d)
        if "label_channels" in d:
            d["label_channels"] = tuple(tuple(c) for c in d["label_channels"])
        return cls(**d)


BACKGROUND = {"delta": 1.0, "theta": 0.6, "alpha": 0.4, "beta": 0.25, "gamma": 0.1}      # roughly 1/f


def default_paradigms() -> list[SynthParadigmSpec]:
    """Three paradigms sharing a 1/f-like background, each with its own focal rhythm and region."""
    return [
        SynthParadigmSpec("alpha_visual", 0, dict(BACKGROUND), {"Occipital": 2.0, "Visual": 1.5},
                          "Occipital", (("O1",), ("O2",)), "alpha"),
        SynthParadigmSpec("beta_motor", 1, dict(BACKGROUND), {"Central": 2.0, "Somatomotor": 1.5},
                          "Central", (("C3",), ("C4",)), "beta"),
        SynthParadigmSpec("theta_frontal", 2, dict(BACKGROUND), {"Prefrontal": 2.0, "Frontal": 1.5},
                          "Prefrontal", (("FP1",), ("FP2",)), "theta"),
    ]


DEFAULT_MONTAGE = ("FP1", "FP2", "F3", "F4", "C3", "C4", "T7", "T8", "P3", "P4", "O1", "O2")


@dataclass
class EegBatch:
    signal: np.ndarray          # (B, T, C, P) volts
    paradigm_id: np.ndarray
    dataset_id: np.ndarray
    label: np.ndarray
    sample_rate: int = SAMPLE_RATE
    channel_names: tuple[str, ...] = DEFAULT_MONTAGE

    def __post_init__(self):
        if self.signal.ndim != 4:
            raise ValueError(f"EegBatch signal must be (B, T, C, P), got {self.signal.shape}")
        if self.signal.shape[-1] != self.sample_rate:
            raise ValueError(f"patch length {self.signal.shape[-1]} != sample rate {self.sample_rate}")
        if not np.all(np.isfinite(self.signal)):
            raise ValueError("EegBatch contains non-finite values")

    def __len__(self) -> int:
        return self.signal.shape[0]

    def subset(self, idx) -> "EegBatch":
        return EegBatch(self.signal[idx], self.paradigm_id[idx], self.dataset_id[idx], self.label[idx],
                        self.sample_rate, self.channel_names)


def patch(signal_stream: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """(C, L) or (B, C, L) stream -> (B, T, C, P) non-overlapping 1-second patches."""
    x = np.asarray(signal_stream, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    b, c, length = x.shape
    t = length // sample_rate
    if t < 1:
        raise ValueError(f"stream of {length} samples is shorter than one {sample_rate}-sample patch")
    x = x[:, :, : t * sample_rate].reshape(b, c, t, sample_rate)
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3))


def _band_noise(rng: RngStream, shape, band, fs) -> np.ndarray:
    """Unit-variance Gaussian noise restricted to ``band`` (power-of-two length)."""
    n = shape[-1]
    spec = fft(rng.normal(shape))
    freqs = np.minimum(np.arange(n), n - np.arange(n)) * fs / n
    spec[..., (freqs < band[0]) | (freqs >= band[1])] = 0.0
    out = ifft(spec).real
    std = out.std(axis=-1, keepdims=True)
    return out / np.where(std > 0, std, 1.0)


def channel_gains(spec: SynthParadigmSpec, montage: Montage, table: GroupTable) -> np.ndarray:
    """Focal-rhythm gain per channel: the largest gain of any group containing it, else 0."""
    gains = np.zeros(len(montage))
    for group, gain in spec.spatial_mixing.items():
        for m in table.channels_of(group):
            ci = montage.channel_index.get(m)
            if ci is not None:
                gains[ci] = max(gains[ci], gain)
    return gains


def synthesize_sample(spec: SynthParadigmSpec, label: int, montage: Montage, table: GroupTable,
                      n_patches: int, rng: RngStream, fs: int = SAMPLE_RATE,
                      filter_band=(1.0, 100.0)) -> np.ndarray:
    """One (C, n_patches * fs) stream in volts, band-pass filtered."""
    taps = design_bandpass(filter_band[0], filter_band[1], fs) if filter_band else None
    margin = 0 if taps is None else (len(taps) // 2 + fs - 1) // fs * fs
    length = n_patches * fs + 2 * margin
    nfft = 1 << (length - 1).bit_length()
    c = len(montage)
    gains = channel_gains(spec, montage, table)
    total_power = sum(spec.band_powers.values()) or 1.0

    x = np.zeros((c, nfft))
    for band, pw in sorted(spec.band_powers.items()):
        if pw > 0:
            amp = spec.background_uv * math.sqrt(pw / total_power)
            x += amp * _band_noise(rng, (c, nfft), BANDS[band], fs)
    focal = BANDS[spec.focal_band or spec.carrier_band]
    source = _band_noise(rng.child("focal"), (1, nfft), focal, fs)
    jitter = _band_noise(rng.child("focal-jitter"), (c, nfft), focal, fs)
    x += spec.focal_uv * gains[:, None] * (0.8 * source + 0.6 * jitter)

    lo, hi = BANDS[spec.carrier_band]
    f0 = rng.uniform((), lo + 0.5, hi - 0.5)
    phase = rng.uniform((), 0.0, 2 * math.pi)
    t = np.arange(nfft) / fs
    offset = 2 * math.pi * label / spec.n_classes
    for side, names in enumerate(spec.label_channels):
        wave = np.cos(2 * math.pi * f0 * t + phase + side * offset)
        for name in names:
            ci = montage.channel_index.get(name)
            if ci is not None:
                x[ci] += spec.carrier_amplitude_uv * wave
    x += spec.noise_sigma_uv * rng.normal((c, nfft))
    x *= VOLT
    if taps is not None:
        x = fft_convolve_same(x, taps)
    return x[:, margin:margin + n_patches * fs]


def _balanced_labels(n: int, n_classes: int, rng: RngStream) -> np.ndarray:
    labels = np.arange(n) % n_classes
    return labels[rng.permutation(n)]


def _split_indices(labels: np.ndarray, fractions, rng: RngStream) -> dict[str, np.ndarray]:
    """Stratified split by label."""
    out = {s: [] for s in SPLITS}
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        idx = idx[rng.permutation(len(idx))]
        n_tr = int(round(fractions[0] * len(idx)))
        n_va = int(round(fractions[1] * len(idx)))
        out["train"].extend(idx[:n_tr])
        out["valid"].extend(idx[n_tr:n_tr + n_va])
        out["test"].extend(idx[n_tr + n_va:])
    return {k: np.sort(np.array(v, dtype=np.int64)) for k, v in out.items()}


def generate_corpus(spec_list, n_samples_per_paradigm: int, seed: int, out_dir,
                    n_patches: int = 4, montage: Montage | None = None,
                    fractions=(0.7, 0.15, 0.15), filter_band=(1.0, 100.0)) -> Path:
    """Write ``train.bin``/``valid.bin``/``test.bin`` and ``meta.json`` to ``out_dir``."""
    specs = list(spec_list)
    if len(specs) < 2:
        raise ValueError("need at least two paradigms")
    ids = [s.paradigm_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate paradigm ids: {ids}")
    if n_samples_per_paradigm <= 0:
        raise ValueError("n_samples_per_paradigm must be positive")
    for s in specs:
        s.validate()
    montage = montage or Montage(DEFAULT_MONTAGE)
    table = GroupTable.load()
    root = RngStream(seed, "corpus")

    records = {s: {"signal": [], "paradigm_id": [], "dataset_id": [], "label": []} for s in SPLITS}
    for spec in specs:
        prng = root.child(f"paradigm-{spec.paradigm_id}")
        labels = _balanced_labels(n_samples_per_paradigm, spec.n_classes, prng.child("labels"))
        signals = np.stack([
            patch(synthesize_sample(spec, int(labels[i]), montage, table, n_patches,
                                    prng.child(f"sample-{i}"), filter_band=filter_band))[0]
            for i in range(n_samples_per_paradigm)])
        parts = _split_indices(labels, fractions, prng.child("split"))
        for split, idx in parts.items():
            rec = records[split]
            rec["signal"].append(signals[idx])
            rec["paradigm_id"].append(np.full(len(idx), spec.paradigm_id, dtype=np.int64))
            rec["dataset_id"].append(np.full(len(idx), spec.paradigm_id, dtype=np.int64))
            rec["label"].append(labels[idx].astype(np.int64))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": "eegmoe-corpus",
        "version": 1,
        "seed": int(seed),
        "sample_rate": SAMPLE_RATE,
        "n_patches": n_patches,
        "channel_names": list(montage.channel_names),
        "filter_band": list(filter_band) if filter_band else None,
        "paradigms": [s.to_dict() for s in specs],
        "splits": {},
    }
    for split in SPLITS:
        rec = records[split]
        cols = {k: np.concatenate(v) for k, v in rec.items()}
        meta["splits"][split] = write_columns(out / f"{split}.bin", cols)
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return out


def write_columns(path: Path, cols: dict[str, np.ndarray]) -> dict:
    """Concatenate little-endian columns into one file; return the column directory."""
    layout = {"n": int(len(cols["label"])), "columns": {}}
    offset = 0
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        for name in ("signal", "paradigm_id", "dataset_id", "label"):
            arr = cols[name]
            dtype = "<f8" if arr.dtype.kind == "f" else "<i8"
            raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
            layout["columns"][name] = {"dtype": dtype, "shape": list(arr.shape), "offset": offset}
            fh.write(raw)
            offset += len(raw)
    os.replace(tmp, path)
    return layout


class Corpus:
    """Memory-mapped view of a corpus directory."""

    def __init__(self, root):
        self.root = Path(root)
        meta_path = self.root / "meta.json"
        if not meta_path.exists():
            raise FileNotFoundError(f"no corpus metadata at {meta_path}")
        with open(meta_path) as fh:
            self.meta = json.load(fh)
        self.sample_rate = self.meta["sample_rate"]
        self.channel_names = tuple(self.meta["channel_names"])
        self.paradigms = [SynthParadigmSpec.from_dict(p) for p in self.meta["paradigms"]]
        self._splits: dict[str, EegBatch] = {}

    @property
    def n_datasets(self) -> int:
        return len(self.paradigms)

    def split(self, name: str) -> EegBatch:
        if name not in self._splits:
            layout = self.meta["splits"][name]
            cols = {}
            for col, info in layout["columns"].items():
                shape = tuple(info["shape"])
                if int(np.prod(shape)) == 0:
                    cols[col] = np.zeros(shape, dtype=info["dtype"])
                    continue
                cols[col] = np.memmap(self.root / f"{name}.bin", dtype=info["dtype"], mode="r",
                                      offset=info["offset"], shape=shape)
            self._splits[name] = EegBatch(cols["signal"], np.asarray(cols["paradigm_id"]),
                                          np.asarray(cols["dataset_id"]), np.asarray(cols["label"]),
                                          self.sample_rate, self.channel_names)
        return self._splits[name]

    def n_classes(self, dataset_id: int) -> int:
        return next(p.n_classes for p in self.paradigms if p.paradigm_id == dataset_id)


def iterate_batches(data: EegBatch, batch_size: int, rng: RngStream, dataset_id: int | None = None,
                    drop_last: bool = False):
    """Shuffled minibatches, optionally restricted to one dataset."""
    idx = np.arange(len(data)) if dataset_id is None else np.flatnonzero(data.dataset_id == dataset_id)
    idx = idx[rng.permutation(len(idx))]
    for start in range(0, len(idx), batch_size):
        sel = np.sort(idx[start:start + batch_size])
        if drop_last and len(sel) < batch_size:
            break
        yield data.subset(sel)


__all__ = ["SynthParadigmSpec", "EegBatch", "Corpus", "generate_corpus", "patch", "default_paradigms",
           "iterate_batches", "synthesize_sample", "STANDARD_1020", "DEFAULT_MONTAGE"]
