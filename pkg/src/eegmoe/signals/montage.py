"""Electrode superset, montages and the static region/network group table."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

# 10-10 positions plus the auxiliary temporal electrodes T1/T2.
SUPERSET: tuple[str, ...] = (
    "FP1", "FPZ", "FP2",
    "AF9", "AF7", "AF5", "AF3", "AF1", "AFZ", "AF2", "AF4", "AF6", "AF8", "AF10",
    "F9", "F7", "F5", "F3", "F1", "FZ", "F2", "F4", "F6", "F8", "F10",
    "FT9", "FT7", "FC5", "FC3", "FC1", "FCZ", "FC2", "FC4", "FC6", "FT8", "FT10",
    "T9", "T7", "C5", "C3", "C1", "CZ", "C2", "C4", "C6", "T8", "T10",
    "TP9", "TP7", "CP5", "CP3", "CP1", "CPZ", "CP2", "CP4", "CP6", "TP8", "TP10",
    "P9", "P7", "P5", "P3", "P1", "PZ", "P2", "P4", "P6", "P8", "P10",
    "PO9", "PO7", "PO5", "PO3", "PO1", "POZ", "PO2", "PO4", "PO6", "PO8", "PO10",
    "O1", "OZ", "O2", "I1", "IZ", "I2",
    "T1", "T2",
)
SUPERSET_INDEX = {name: i for i, name in enumerate(SUPERSET)}

# legacy 10-20 names
ALIASES = {"T3": "T7", "T4": "T8", "T5": "P7", "T6": "P8"}

# classic 10-20 layout; default montage of the synthetic corpus
STANDARD_1020 = ("FP1", "FP2", "F7", "F3", "FZ", "F4", "F8", "T7", "C3", "CZ",
                 "C4", "T8", "P7", "P3", "PZ", "P4", "P8", "O1", "O2")


class UnknownChannelError(KeyError):
    pass


def canonical_name(name: str) -> str:
    key = name.strip().upper()
    key = ALIASES.get(key, key)
    if key not in SUPERSET_INDEX:
        raise UnknownChannelError(f"channel {name!r} is not in the electrode superset")
    return key


@dataclass(frozen=True)
class Montage:
    channel_names: tuple[str, ...]
    channel_index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = tuple(canonical_name(n) for n in self.channel_names)
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate channels in montage: {names}")
        object.__setattr__(self, "channel_names", names)
        object.__setattr__(self, "channel_index", {n: i for i, n in enumerate(names)})

    def __len__(self) -> int:
        return len(self.channel_names)

    def superset_positions(self) -> np.ndarray:
        return np.array([SUPERSET_INDEX[n] for n in self.channel_names], dtype=np.int64)


@dataclass(frozen=True)
class GroupTable:
    groups: tuple[tuple[str, tuple[str, ...]], ...]

    @classmethod
    def load(cls, path=None) -> "GroupTable":
        if path is None:
            text = resources.files("eegmoe.signals").joinpath("assets/groups.json").read_text()
        else:
            with open(path) as fh:
                text = fh.read()
        raw = json.loads(text)
        groups = [(name, tuple(members)) for name, members in raw["regions"] + raw["networks"]]
        table = cls(tuple(groups))
        table.validate()
        return table

    def validate(self) -> None:
        if len(self.groups) != 16:
            raise ValueError(f"expected 16 static groups, found {len(self.groups)}")
        for name, members in self.groups:
            for m in members:
                if m not in SUPERSET_INDEX:
                    raise UnknownChannelError(f"group {name!r} member {m!r} not in superset")

    @property
    def names(self) -> list[str]:
        return [g for g, _ in self.groups]

    def __len__(self) -> int:
        return len(self.groups)

    def membership(self, montage: Montage) -> np.ndarray:
        """Boolean (groups, channels) matrix for the given montage."""
        mem = np.zeros((len(self.groups), len(montage)), dtype=bool)
        for gi, (_, members) in enumerate(self.groups):
            for m in members:
                ci = montage.channel_index.get(m)
                if ci is not None:
                    mem[gi, ci] = True
        return mem

    def channels_of(self, name: str) -> tuple[str, ...]:
        return dict(self.groups)[name]
